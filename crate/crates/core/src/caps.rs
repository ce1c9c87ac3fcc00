//! Capsule layers: squash, primary capsules, prediction through the
//! transformation tensor and single-pass self-attention routing.
//!
//! Shapes, with `N` the batch size and `l` / `l1` the lower / upper layer:
//!
//! | value            | shape                    |
//! |------------------|--------------------------|
//! | lower capsules   | `[N, n_l, d_l]`          |
//! | `W`              | `[n_l, n_l1, d_l, d_l1]` |
//! | `B` (log priors) | `[n_l, n_l1]`            |
//! | predictions `Û`  | `[N, n_l, n_l1, d_l1]`   |
//! | agreement `A`    | `[N, n_l, n_l, n_l1]`    |
//! | coupling `C`     | `[N, n_l, n_l1]`         |
//!
//! Routing computes `A` and `C` exactly once per forward pass; there is no
//! refinement loop.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::ops::{depthwise_conv2d, softmax, softmax_backward};
use crate::tensor::{Scalar, Tensor};

/// Added to `‖s‖²` so the squash of a zero vector is well defined.
pub const SQUASH_EPS: f64 = 1e-12;

/// `[N, n, d]`: `n` capsules of dimension `d` per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsTensor<T = f32>(Tensor<T>);

impl<T: Scalar> CapsTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.expect_rank(3, "capsule tensor")?;
        Ok(Self(values))
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn count(&self) -> usize {
        self.0.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.0.dim(2)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_values(self) -> Tensor<T> {
        self.0
    }

    /// Capsule vector `cap` of batch item `item`.
    pub fn capsule(&self, item: usize, cap: usize) -> &[T] {
        let d = self.dim();
        let at = (item * self.count() + cap) * d;
        &self.0.data()[at..at + d]
    }

    /// Euclidean norms, `[N, n]`.
    pub fn lengths(&self) -> Tensor<T> {
        let d = self.dim();
        let eps = T::of(SQUASH_EPS);
        let data = self
            .0
            .data()
            .chunks_exact(d)
            .map(|v| (v.iter().map(|&x| x * x).sum::<T>() + eps).sqrt())
            .collect();
        Tensor::new(&[self.batch(), self.count()], data).expect("lengths shape")
    }

    /// Gradient of [`CapsTensor::lengths`] with respect to the capsule values.
    pub fn lengths_backward(&self, grad_lengths: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_lengths.shape() != [self.batch(), self.count()] {
            return Err(dim_err!(
                "length gradient has shape {:?}, expected [{}, {}]",
                grad_lengths.shape(),
                self.batch(),
                self.count()
            ));
        }
        let d = self.dim();
        let lengths = self.lengths();
        let mut out = vec![T::zero(); self.0.len()];
        for (((o, v), &len), &g) in out
            .chunks_exact_mut(d)
            .zip(self.0.data().chunks_exact(d))
            .zip(lengths.data())
            .zip(grad_lengths.data())
        {
            for (oi, &vi) in o.iter_mut().zip(v) {
                *oi = g * vi / len;
            }
        }
        Tensor::new(self.0.shape(), out)
    }
}

/// `squash(s) = (1 - e^{-‖s‖}) s / ‖s‖`, applied per capsule.
pub fn squash<T: Scalar>(s: &CapsTensor<T>) -> CapsTensor<T> {
    let d = s.dim();
    let eps = T::of(SQUASH_EPS);
    let mut out = s.0.data().to_vec();
    for v in out.chunks_exact_mut(d) {
        let norm = (v.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
        let gain = -(-norm).exp_m1() / norm;
        v.iter_mut().for_each(|x| *x *= gain);
    }
    CapsTensor(Tensor::new(s.0.shape(), out).expect("squash shape"))
}

/// Vector-Jacobian product of [`squash`] at pre-activation `s`.
pub fn squash_backward<T: Scalar>(s: &CapsTensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    s.0.expect_same_shape(grad_out)?;
    let d = s.dim();
    let eps = T::of(SQUASH_EPS);
    let mut out = vec![T::zero(); grad_out.len()];
    for ((o, v), g) in out
        .chunks_exact_mut(d)
        .zip(s.0.data().chunks_exact(d))
        .zip(grad_out.data().chunks_exact(d))
    {
        let norm = (v.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
        let decay = (-norm).exp();
        let f = -(-norm).exp_m1();
        let gain = f / norm;
        // d(gain)/d(norm) / norm
        let radial = (norm * decay - f) / (norm * norm * norm);
        let dot: T = v.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((oi, &vi), &gi) in o.iter_mut().zip(v).zip(g) {
            *oi = gain * gi + radial * dot * vi;
        }
    }
    Tensor::new(s.0.shape(), out)
}

/// Reinterprets `[N, 1, 1, n*d]` (or `[N, n*d]`) as `n` capsules of size `d`:
/// channel `c` becomes component `c % d` of capsule `c / d`.
pub fn channels_to_capsules<T: Scalar>(features: Tensor<T>, n: usize, d: usize) -> Result<CapsTensor<T>> {
    let batch = features.dim(0);
    let per_item: usize = features.shape()[1..].iter().product();
    if per_item != n * d {
        return Err(Error::Config(format!(
            "{per_item} features cannot form {n} capsules of dimension {d}"
        )));
    }
    CapsTensor::new(features.reshape(&[batch, n, d])?)
}

/// Primary capsules: a depthwise convolution whose kernel spans the whole
/// feature map collapses each channel to one value, the `F = n*d` values are
/// grouped into capsules and squashed.
pub fn primary_caps<T: Scalar>(
    feature_map: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    n: usize,
    d: usize,
) -> Result<CapsTensor<T>> {
    feature_map.expect_rank(4, "primary-capsule feature map")?;
    let fs = feature_map.shape();
    if fs[3] != n * d {
        return Err(Error::Config(format!(
            "feature map has {} channels but {n} capsules of dimension {d} need {}",
            fs[3],
            n * d
        )));
    }
    if kernel.rank() != 3 || kernel.dim(0) != fs[1] || kernel.dim(1) != fs[2] {
        return Err(Error::Config(format!(
            "primary-capsule kernel {:?} must span the {}x{} feature map",
            kernel.shape(),
            fs[1],
            fs[2]
        )));
    }
    let pre = depthwise_conv2d(feature_map, kernel, bias, 1)?;
    Ok(squash(&channels_to_capsules(pre, n, d)?))
}

/// Per-pair transformation tensor and routing log priors of one capsule layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsDenseParams<T = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> CapsDenseParams<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        w.expect_rank(4, "capsule transformation tensor")?;
        if b.shape() != [w.dim(0), w.dim(1)] {
            return Err(dim_err!(
                "log priors {:?} do not match transformation tensor {:?}",
                b.shape(),
                w.shape()
            ));
        }
        if !w.is_finite() || !b.is_finite() {
            return Err(Error::Numeric("capsule parameters must be finite".into()));
        }
        Ok(Self { w, b })
    }

    /// `W ~ N(0, 1 / (n_l * d_l))`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(n_l: usize, d_l: usize, n_l1: usize, d_l1: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((n_l * d_l) as f64).sqrt();
        Self {
            w: Tensor::randn(&[n_l, n_l1, d_l, d_l1], std, rng),
            b: Tensor::zeros(&[n_l, n_l1]),
        }
    }

    pub fn lower_count(&self) -> usize {
        self.w.dim(0)
    }

    pub fn upper_count(&self) -> usize {
        self.w.dim(1)
    }

    pub fn lower_dim(&self) -> usize {
        self.w.dim(2)
    }

    pub fn upper_dim(&self) -> usize {
        self.w.dim(3)
    }
}

/// Intermediate values of one routing pass.
#[derive(Clone, Debug)]
pub struct RoutingTrace<T = f32> {
    /// `Û`, `[N, n_l, n_l1, d_l1]`.
    pub predictions: Tensor<T>,
    /// `A`, `[N, n_l, n_l, n_l1]`.
    pub agreement: Tensor<T>,
    /// `C`, `[N, n_l, n_l1]`.
    pub coupling: Tensor<T>,
    /// Upper capsules before squash, `[N, n_l1, d_l1]`.
    pub pre_squash: CapsTensor<T>,
}

/// `Û[i, j, k, :] = u[i, j, :]ᵀ W[j, k, :, :]`.
pub fn predict<T: Scalar>(u: &CapsTensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    w.expect_rank(4, "transformation tensor")?;
    let (n, nl, dl) = (u.batch(), u.count(), u.dim());
    let (nl1, dl1) = (w.dim(1), w.dim(3));
    if w.dim(0) != nl || w.dim(2) != dl {
        return Err(dim_err!(
            "transformation tensor {:?} does not fit capsules [{n}, {nl}, {dl}]",
            w.shape()
        ));
    }
    let (ud, wd) = (u.values().data(), w.data());
    let mut out = vec![T::zero(); n * nl * nl1 * dl1];
    for i in 0..n {
        for j in 0..nl {
            let uv = &ud[(i * nl + j) * dl..(i * nl + j + 1) * dl];
            for k in 0..nl1 {
                let o = &mut out[((i * nl + j) * nl1 + k) * dl1..((i * nl + j) * nl1 + k + 1) * dl1];
                let wjk = &wd[(j * nl1 + k) * dl * dl1..(j * nl1 + k + 1) * dl * dl1];
                for (c, &uc) in uv.iter().enumerate() {
                    for (oe, &we) in o.iter_mut().zip(&wjk[c * dl1..(c + 1) * dl1]) {
                        *oe += uc * we;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, nl, nl1, dl1], out)
}

/// Returns `(d u, d W)`.
pub fn predict_backward<T: Scalar>(
    u: &CapsTensor<T>,
    w: &Tensor<T>,
    grad_pred: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, nl, dl) = (u.batch(), u.count(), u.dim());
    let (nl1, dl1) = (w.dim(1), w.dim(3));
    if grad_pred.shape() != [n, nl, nl1, dl1] {
        return Err(dim_err!(
            "prediction gradient has shape {:?}, expected {:?}",
            grad_pred.shape(),
            [n, nl, nl1, dl1]
        ));
    }
    let (ud, wd, gd) = (u.values().data(), w.data(), grad_pred.data());
    let mut du = vec![T::zero(); ud.len()];
    let mut dw = vec![T::zero(); wd.len()];
    for i in 0..n {
        for j in 0..nl {
            let base_u = (i * nl + j) * dl;
            for k in 0..nl1 {
                let g = &gd[((i * nl + j) * nl1 + k) * dl1..((i * nl + j) * nl1 + k + 1) * dl1];
                let wbase = (j * nl1 + k) * dl * dl1;
                for c in 0..dl {
                    let uc = ud[base_u + c];
                    let wrow = &wd[wbase + c * dl1..wbase + (c + 1) * dl1];
                    let dwrow = &mut dw[wbase + c * dl1..wbase + (c + 1) * dl1];
                    let mut acc = T::zero();
                    for e in 0..dl1 {
                        dwrow[e] += uc * g[e];
                        acc += wrow[e] * g[e];
                    }
                    du[base_u + c] += acc;
                }
            }
        }
    }
    Ok((Tensor::new(u.values().shape(), du)?, Tensor::new(w.shape(), dw)?))
}

fn prediction_dims<T: Scalar>(pred: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    pred.expect_rank(4, "prediction tensor")?;
    let s = pred.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// `A[i, :, :, k] = Û[i, :, k, :] Û[i, :, k, :]ᵀ / sqrt(scale_dim)`.
///
/// `scale_dim` is the lower-layer capsule dimension `d_l`.
pub fn attention_scores<T: Scalar>(pred: &Tensor<T>, scale_dim: usize) -> Result<Tensor<T>> {
    let (n, nl, nl1, dl1) = prediction_dims(pred)?;
    if scale_dim == 0 {
        return Err(Error::Argument("attention scale dimension must be positive".into()));
    }
    let inv = T::one() / T::of(scale_dim as f64).sqrt();
    let p = pred.data();
    let at = |i: usize, j: usize, k: usize| ((i * nl + j) * nl1 + k) * dl1;
    let mut a = vec![T::zero(); n * nl * nl * nl1];
    for i in 0..n {
        for j in 0..nl {
            for m in j..nl {
                for k in 0..nl1 {
                    let (x, y) = (&p[at(i, j, k)..at(i, j, k) + dl1], &p[at(i, m, k)..at(i, m, k) + dl1]);
                    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() * inv;
                    a[((i * nl + j) * nl + m) * nl1 + k] = dot;
                    a[((i * nl + m) * nl + j) * nl1 + k] = dot;
                }
            }
        }
    }
    Tensor::new(&[n, nl, nl, nl1], a)
}

pub fn attention_scores_backward<T: Scalar>(
    pred: &Tensor<T>,
    scale_dim: usize,
    grad_agreement: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, nl, nl1, dl1) = prediction_dims(pred)?;
    if grad_agreement.shape() != [n, nl, nl, nl1] {
        return Err(dim_err!(
            "agreement gradient has shape {:?}, expected {:?}",
            grad_agreement.shape(),
            [n, nl, nl, nl1]
        ));
    }
    let inv = T::one() / T::of(scale_dim as f64).sqrt();
    let (p, ga) = (pred.data(), grad_agreement.data());
    let at = |i: usize, j: usize, k: usize| ((i * nl + j) * nl1 + k) * dl1;
    let mut dp = vec![T::zero(); p.len()];
    for i in 0..n {
        for j in 0..nl {
            for m in 0..nl {
                for k in 0..nl1 {
                    let w = (ga[((i * nl + j) * nl + m) * nl1 + k] + ga[((i * nl + m) * nl + j) * nl1 + k]) * inv;
                    let src = at(i, m, k);
                    let dst = at(i, j, k);
                    for e in 0..dl1 {
                        dp[dst + e] += w * p[src + e];
                    }
                }
            }
        }
    }
    Tensor::new(pred.shape(), dp)
}

/// `C[i, j, :] = softmax_k(sum_m A[i, j, m, k])`: each lower capsule's
/// coefficients over the upper layer sum to one.
pub fn coupling<T: Scalar>(agreement: &Tensor<T>) -> Result<Tensor<T>> {
    agreement.expect_rank(4, "agreement tensor")?;
    if !agreement.is_finite() {
        return Err(Error::Numeric("agreement scores contain non-finite values".into()));
    }
    let s = agreement.shape();
    let (n, nl, nl1) = (s[0], s[1], s[3]);
    let a = agreement.data();
    let mut logits = vec![T::zero(); n * nl * nl1];
    for i in 0..n {
        for j in 0..nl {
            let row = &mut logits[(i * nl + j) * nl1..(i * nl + j + 1) * nl1];
            for m in 0..nl {
                let src = &a[((i * nl + j) * nl + m) * nl1..((i * nl + j) * nl + m + 1) * nl1];
                row.iter_mut().zip(src).for_each(|(r, &v)| *r += v);
            }
        }
    }
    softmax(&Tensor::new(&[n, nl, nl1], logits)?, 2)
}

pub fn coupling_backward<T: Scalar>(coupling: &Tensor<T>, grad_coupling: &Tensor<T>) -> Result<Tensor<T>> {
    let dlogits = softmax_backward(coupling, grad_coupling, 2)?;
    let s = coupling.shape();
    let (n, nl, nl1) = (s[0], s[1], s[2]);
    let dl = dlogits.data();
    let mut da = vec![T::zero(); n * nl * nl * nl1];
    for i in 0..n {
        for j in 0..nl {
            let src = &dl[(i * nl + j) * nl1..(i * nl + j + 1) * nl1];
            for m in 0..nl {
                da[((i * nl + j) * nl + m) * nl1..((i * nl + j) * nl + m + 1) * nl1].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[n, nl, nl, nl1], da)
}

/// Fully connected capsule layer with self-attention routing:
/// `s[i, k] = sum_j Û[i, j, k] (C[i, j, k] + B[j, k])`, output `squash(s)`.
pub fn caps_dense_forward<T: Scalar>(
    u: &CapsTensor<T>,
    params: &CapsDenseParams<T>,
) -> Result<(CapsTensor<T>, RoutingTrace<T>)> {
    let predictions = predict(u, &params.w)?;
    let agreement = attention_scores(&predictions, u.dim())?;
    let coupling = coupling(&agreement)?;

    let (n, nl, nl1, dl1) = prediction_dims(&predictions)?;
    let (p, c, b) = (predictions.data(), coupling.data(), params.b.data());
    let mut s = vec![T::zero(); n * nl1 * dl1];
    for i in 0..n {
        for j in 0..nl {
            for k in 0..nl1 {
                let weight = c[(i * nl + j) * nl1 + k] + b[j * nl1 + k];
                let src = &p[((i * nl + j) * nl1 + k) * dl1..((i * nl + j) * nl1 + k + 1) * dl1];
                let dst = &mut s[(i * nl1 + k) * dl1..(i * nl1 + k + 1) * dl1];
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o += weight * v);
            }
        }
    }
    let pre_squash = CapsTensor::new(Tensor::new(&[n, nl1, dl1], s)?)?;
    let out = squash(&pre_squash);
    Ok((
        out,
        RoutingTrace {
            predictions,
            agreement,
            coupling,
            pre_squash,
        },
    ))
}

pub struct CapsDenseGrads<T> {
    pub input: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Backpropagates through squash, the weighted sum, the coupling softmax,
/// the agreement scores and the predictions.
pub fn caps_dense_backward<T: Scalar>(
    u: &CapsTensor<T>,
    params: &CapsDenseParams<T>,
    trace: &RoutingTrace<T>,
    grad_out: &Tensor<T>,
) -> Result<CapsDenseGrads<T>> {
    let ds = squash_backward(&trace.pre_squash, grad_out)?;
    let (n, nl, nl1, dl1) = prediction_dims(&trace.predictions)?;
    let (p, c, b, g) = (
        trace.predictions.data(),
        trace.coupling.data(),
        params.b.data(),
        ds.data(),
    );
    let mut dpred = vec![T::zero(); p.len()];
    let mut dc = vec![T::zero(); c.len()];
    let mut db = vec![T::zero(); b.len()];
    for i in 0..n {
        for j in 0..nl {
            for k in 0..nl1 {
                let weight = c[(i * nl + j) * nl1 + k] + b[j * nl1 + k];
                let at = ((i * nl + j) * nl1 + k) * dl1;
                let gs = &g[(i * nl1 + k) * dl1..(i * nl1 + k + 1) * dl1];
                let mut dot = T::zero();
                for e in 0..dl1 {
                    dpred[at + e] = weight * gs[e];
                    dot += gs[e] * p[at + e];
                }
                dc[(i * nl + j) * nl1 + k] = dot;
                db[j * nl1 + k] += dot;
            }
        }
    }
    let dc = Tensor::new(trace.coupling.shape(), dc)?;
    let da = coupling_backward(&trace.coupling, &dc)?;
    let mut dpred = Tensor::new(trace.predictions.shape(), dpred)?;
    dpred.add_assign(&attention_scores_backward(&trace.predictions, u.dim(), &da)?)?;
    let (du, dw) = predict_backward(u, &params.w, &dpred)?;
    Ok(CapsDenseGrads {
        input: du,
        w: dw,
        b: Tensor::new(params.b.shape(), db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(shape: &[usize], data: Vec<f64>) -> CapsTensor<f64> {
        CapsTensor::new(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn squash_reference_values() {
        let zero = squash(&caps(&[1, 1, 3], vec![0.0; 3]));
        assert!(zero.values().data().iter().all(|&v| v.abs() < 1e-12));

        let unit = squash(&caps(&[1, 1, 2], vec![1.0, 0.0]));
        assert!((unit.values().data()[0] - 0.6321206).abs() < 1e-7);
        assert_eq!(unit.values().data()[1], 0.0);

        let v = squash(&caps(&[1, 1, 2], vec![3.0, 4.0]));
        assert!((v.values().data()[0] - 0.5959573).abs() < 1e-7);
        assert!((v.values().data()[1] - 0.7946096).abs() < 1e-7);
        assert!((v.lengths().data()[0] - 0.9932621).abs() < 1e-7);
    }

    #[test]
    fn identity_transform_copies_capsules() {
        let u = caps(&[2, 3, 2], (0..12).map(|i| i as f64).collect());
        let w = Tensor::from_fn(&[3, 4, 2, 2], |i| if (i / 2) % 2 == i % 2 { 1.0 } else { 0.0 });
        let pred = predict(&u, &w).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let at = ((i * 3 + j) * 4 + k) * 2;
                    assert_eq!(&pred.data()[at..at + 2], u.capsule(i, j));
                }
            }
        }
    }

    #[test]
    fn scalar_prediction() {
        let u = caps(&[1, 1, 1], vec![2.0]);
        let w = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(predict(&u, &w).unwrap().data(), &[6.0]);
    }

    /// Two lower capsules, two upper capsules, one-dimensional predictions:
    /// upper 0 receives [1, 1] (agreeing), upper 1 receives [1, -1].
    fn two_by_two() -> Tensor<f64> {
        Tensor::new(&[1, 2, 2, 1], vec![1.0, 1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn hand_agreement_and_coupling() {
        let pred = two_by_two();
        let a = attention_scores(&pred, 1).unwrap();
        // k = 0: [[1,1],[1,1]]; k = 1: [[1,-1],[-1,1]]
        assert_eq!(a.data(), &[1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0]);
        let c = coupling(&a).unwrap();
        for j in 0..2 {
            assert!((c.data()[j * 2] - 0.88080).abs() < 1e-4);
            assert!((c.data()[j * 2 + 1] - 0.11920).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_predictions_give_constant_agreement() {
        let pred = Tensor::from_fn(&[1, 3, 2, 2], |i| if i % 4 < 2 { 0.5 } else { -2.0 });
        let a = attention_scores(&pred, 4).unwrap();
        for k in 0..2 {
            let vals: Vec<f64> = (0..9).map(|jm| a.data()[jm * 2 + k]).collect();
            assert!(vals.iter().all(|&v| v == vals[0]));
        }
    }

    #[test]
    fn uniform_and_singleton_coupling() {
        let a = Tensor::<f64>::full(&[2, 3, 3, 4], 0.7);
        assert!(coupling(&a).unwrap().data().iter().all(|&c| (c - 0.25).abs() < 1e-12));
        let single = Tensor::from_fn(&[1, 3, 3, 1], |i| i as f64);
        assert!(coupling(&single).unwrap().data().iter().all(|&c| c == 1.0));
        let bad = Tensor::full(&[1, 1, 1, 2], f64::NAN);
        assert!(matches!(coupling(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_lower_capsule_reduces_to_prior_shift() {
        let u = caps(&[1, 1, 2], vec![0.3, -0.4]);
        let w = Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.37).sin());
        let b = Tensor::new(&[1, 3], vec![0.5, -0.2, 0.0]).unwrap();
        let params = CapsDenseParams::new(w.clone(), b.clone()).unwrap();
        let (_, trace) = caps_dense_forward(&u, &params).unwrap();
        let pred = predict(&u, &w).unwrap();
        for k in 0..3 {
            // C has a single lower capsule, but softmax still runs over the three upper capsules.
            let ck = trace.coupling.data()[k];
            for e in 0..2 {
                let expect = pred.data()[k * 2 + e] * (ck + b.data()[k]);
                assert!((trace.pre_squash.values().data()[k * 2 + e] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_predictions_sum_with_uniform_coupling() {
        // Every lower capsule predicts v for every upper capsule, B = 0.
        let (nl, nl1) = (4, 2);
        let u = caps(&[1, nl, 1], vec![1.0; nl]);
        let w = Tensor::from_fn(&[nl, nl1, 1, 3], |i| [0.2, -0.1, 0.4][i % 3]);
        let params = CapsDenseParams::new(w, Tensor::zeros(&[nl, nl1])).unwrap();
        let (_, trace) = caps_dense_forward(&u, &params).unwrap();
        let scale = nl as f64 / nl1 as f64;
        for k in 0..nl1 {
            for (e, &v) in [0.2, -0.1, 0.4].iter().enumerate() {
                let got = trace.pre_squash.values().data()[k * 3 + e];
                assert!((got - v * scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn primary_caps_configuration_errors() {
        let fm = Tensor::<f64>::zeros(&[1, 3, 3, 6]);
        let k = Tensor::zeros(&[3, 3, 6]);
        let b = Tensor::zeros(&[6]);
        assert!(matches!(primary_caps(&fm, &k, &b, 4, 2), Err(Error::Config(_))));
        let small = Tensor::zeros(&[2, 2, 6]);
        assert!(matches!(primary_caps(&fm, &small, &b, 3, 2), Err(Error::Config(_))));
        let out = primary_caps(&fm, &k, &b, 3, 2).unwrap();
        assert_eq!(out.values().shape(), &[1, 3, 2]);
        assert!(out.values().data().iter().all(|&v| v.abs() < 1e-12));
    }
}
