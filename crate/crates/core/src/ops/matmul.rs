use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Broadcast plan for the leading (batch) axes of a batched matmul.
struct BatchPlan {
    lead: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err!("matmul operands need rank >= 2, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions differ: {a:?} x {b:?}"));
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let rank = a_lead.len().max(b_lead.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_lead), pad(b_lead));
    let mut lead = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(dim_err!("matmul batch axes not broadcastable: {a:?} x {b:?}"));
        }
        lead.push(x.max(y));
    }
    let count: usize = lead.iter().product();
    let mut a_offsets = Vec::with_capacity(count);
    let mut b_offsets = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let (mut oa, mut ob) = (0, 0);
        for axis in 0..rank {
            oa = oa * pa[axis] + if pa[axis] == 1 { 0 } else { idx[axis] };
            ob = ob * pb[axis] + if pb[axis] == 1 { 0 } else { idx[axis] };
        }
        a_offsets.push(oa * m * k);
        b_offsets.push(ob * k * n);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < lead[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Ok(BatchPlan {
        lead,
        a_offsets,
        b_offsets,
        m,
        k,
        n,
    })
}

/// Matrix product over the trailing two axes, broadcasting the leading ones.
pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.a_offsets.len() * m * n];
    for (i, (&oa, &ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        gemm(
            m,
            k,
            n,
            &a.data()[oa..oa + m * k],
            false,
            &b.data()[ob..ob + k * n],
            false,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = p.lead;
    shape.extend_from_slice(&[m, n]);
    Tensor::new(&shape, out)
}

/// Gradients of [`matmul_batched`], reduced back over broadcast axes.
pub fn matmul_batched_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let p = plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut expected = p.lead.clone();
    expected.extend_from_slice(&[m, n]);
    if grad_out.shape() != expected.as_slice() {
        return Err(dim_err!(
            "matmul gradient has shape {:?}, expected {expected:?}",
            grad_out.shape()
        ));
    }
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    let dy = grad_out.data();
    for (i, (&oa, &ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        let g = &dy[i * m * n..(i + 1) * m * n];
        gemm(m, n, k, g, false, &b.data()[ob..ob + k * n], true, T::one(), &mut da[oa..oa + m * k]);
        gemm(k, m, n, &a.data()[oa..oa + m * k], true, g, false, T::one(), &mut db[ob..ob + k * n]);
    }
    Ok((Tensor::new(a.shape(), da)?, Tensor::new(b.shape(), db)?))
}

/// Fully connected layer `x[N, in] * w[in, out] + bias[out]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(2, "dense input")?;
    w.expect_rank(2, "dense weight")?;
    let (n, fan_in, fan_out) = (x.dim(0), w.dim(0), w.dim(1));
    if x.dim(1) != fan_in || bias.shape() != [fan_out] {
        return Err(dim_err!(
            "dense: input {:?}, weight {:?}, bias {:?} are inconsistent",
            x.shape(),
            w.shape(),
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, fan_in, fan_out, x.data(), false, w.data(), false, T::one(), &mut out);
    Tensor::new(&[n, fan_out], out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, fan_in, fan_out) = (x.dim(0), w.dim(0), w.dim(1));
    if grad_out.shape() != [n, fan_out] {
        return Err(dim_err!(
            "dense gradient has shape {:?}, expected [{n}, {fan_out}]",
            grad_out.shape()
        ));
    }
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * fan_in];
    gemm(n, fan_out, fan_in, dy, false, w.data(), true, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); fan_in * fan_out];
    gemm(fan_in, n, fan_out, x.data(), true, dy, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); fan_out];
    for r in dy.chunks_exact(fan_out) {
        db.iter_mut().zip(r).for_each(|(b, &v)| *b += v);
    }
    Ok(DenseGrads {
        input: Tensor::new(&[n, fan_in], dx)?,
        weight: Tensor::new(&[fan_in, fan_out], dw)?,
        bias: Tensor::new(&[fan_out], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product() {
        let a = Tensor::new(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul_batched(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn identity_right_factor() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64 * 0.5 - 3.0);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(matmul_batched(&a, &eye).unwrap(), a);
    }

    #[test]
    fn broadcasts_leading_axes() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[4, 3, 2], |i| (i % 5) as f64);
        let c = matmul_batched(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let direct = matmul_batched(&a.slice_outer(1).slice_outer(0), &b.slice_outer(3)).unwrap();
        assert_eq!(c.slice_outer(1).slice_outer(3), direct);
    }

    #[test]
    fn inner_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul_batched(&a, &b).is_err());
    }
}
