use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Pointwise maps used by the model graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    /// Subgradient 0 at exactly 0.
    Relu,
    Exp,
    Sigmoid,
    Scale(f64),
    Add(f64),
}

impl Elementwise {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Elementwise::Relu => x.max(T::zero()),
            Elementwise::Exp => x.exp(),
            Elementwise::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Elementwise::Scale(s) => x * T::of(s),
            Elementwise::Add(a) => x + T::of(a),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Elementwise::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Elementwise::Exp => y,
            Elementwise::Sigmoid => y * (T::one() - y),
            Elementwise::Scale(s) => T::of(s),
            Elementwise::Add(_) => T::one(),
        }
    }
}

pub fn elementwise<T: Scalar>(input: &Tensor<T>, f: Elementwise) -> Tensor<T> {
    input.map(|x| f.apply(x))
}

pub fn elementwise_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    f: Elementwise,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.expect_same_shape(grad_out)?;
    input.expect_same_shape(output)?;
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| g * f.derivative(x, y))
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    elementwise(input, Elementwise::Relu)
}

/// Masks `grad_out` where the ReLU input was not positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Elementwise sum of two equally shaped tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Vector-Jacobian product of softmax given its output.
pub fn softmax_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    output.expect_same_shape(grad_out)?;
    let (outer, len, inner) = axis_layout(output.shape(), axis)?;
    let (y, g) = (output.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_exp_values() {
        let x = Tensor::new(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full(&[3], 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
        let z = Tensor::new(&[1], vec![0.0f64]).unwrap();
        assert_eq!(elementwise(&z, Elementwise::Exp).data(), &[1.0]);
    }

    #[test]
    fn softmax_values() {
        let eq = Tensor::full(&[2, 4], 0.3f64);
        let y = softmax(&eq, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = Tensor::new(&[2], vec![2.0f64, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.880797).abs() < 1e-5);
        assert!((y.data()[1] - 0.119203).abs() < 1e-5);
    }

    #[test]
    fn softmax_shift_invariant_and_overflow_safe() {
        let x = Tensor::new(&[2, 3], vec![1.0f64, -2.0, 0.5, 3.0, 3.0, -1.0]).unwrap();
        let shifted = x.map(|v| v + 1000.0);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        assert!(b.is_finite());
        assert!(softmax(&x, 2).is_err());
    }
}
