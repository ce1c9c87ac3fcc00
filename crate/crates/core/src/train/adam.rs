use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments aligned with a [`ModelParams`] ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns the number of scalars updated.
///
/// Any non-finite gradient aborts before a single parameter changes.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelGrads<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
    lr: f64,
    batch_index: usize,
) -> Result<usize> {
    if grads.tensors.len() != params.tensor_count() || state.m.len() != params.tensor_count() {
        return Err(Error::Argument(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.tensors.len(),
            state.m.len(),
            params.tensor_count()
        )));
    }
    for ((name, g), (pname, p)) in grads.tensors.iter().zip(params.iter()) {
        if name != pname || g.shape() != p.shape() {
            return Err(Error::Argument(format!(
                "gradient '{name}' {:?} does not match parameter '{pname}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{name}' at batch {batch_index}"
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(cfg.eps);

    let mut touched = 0;
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads.tensors[i].1.data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *x -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
        touched += g.len();
    }
    Ok(touched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::RunningStats;

    fn single(value: f64) -> ModelParams<f64> {
        ModelParams::from_parts(vec![("x".into(), Tensor::scalar(value))], Vec::<(usize, RunningStats<f64>)>::new())
            .unwrap()
    }

    fn grad(value: f64) -> ModelGrads<f64> {
        ModelGrads {
            tensors: vec![("x".into(), Tensor::scalar(value))],
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.3);
        let mut s = OptimizerState::new(&p);
        for i in 0..3 {
            adam_step(&mut p, &grad(0.0), &mut s, &AdamConfig::default(), 1e-3, i).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data()[0], 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let lr = 5e-4;
        adam_step(&mut p, &grad(1.0), &mut s, &AdamConfig::default(), lr, 0).unwrap();
        // m_hat = 1, v_hat = 1: the step is lr / (1 + eps)
        let moved = 1.0 - p.get("x").unwrap().data()[0];
        assert!((moved - lr / (1.0 + 1e-8)).abs() < 1e-15);
        adam_step(&mut p, &grad(1.0), &mut s, &AdamConfig::default(), lr, 1).unwrap();
        assert!((1.0 - p.get("x").unwrap().data()[0] - 2.0 * lr / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_name_and_batch() {
        let mut p = single(1.0);
        let mut s = OptimizerState::new(&p);
        let err = adam_step(&mut p, &grad(f64::NAN), &mut s, &AdamConfig::default(), 1e-3, 17).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'x'") && msg.contains("batch 17"), "{msg}");
        assert_eq!(p.get("x").unwrap().data()[0], 1.0);
        assert_eq!(s.step, 0);
    }
}
