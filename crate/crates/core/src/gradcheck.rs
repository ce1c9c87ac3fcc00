//! Central finite-difference verification of every backward pass.
//!
//! Each check contracts the operation's output with a fixed random
//! projection `P`, so the scalar `L(x) = <P, f(x)>` has gradient
//! `backward(x, P)`. Probed entries are compared against
//! `(L(x + h e) - L(x - h e)) / 2h` by relative error
//! `|a - n| / max(|a|, |n|, 1e-8)`.
//!
//! A probe failing at the base step is retried at smaller steps (a probe
//! straddling a ReLU or hinge kink) and larger ones (round-off on tiny
//! gradients); the best agreement counts. A wrong gradient fails at every
//! step.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::caps::{
    attention_scores, attention_scores_backward, caps_dense_backward, caps_dense_forward, coupling,
    coupling_backward, predict, predict_backward, squash, squash_backward, CapsDenseParams, CapsTensor,
};
use crate::data::{Batch, Sample};
use crate::error::{Error, Result};
use crate::model::{build_mnist_spec, loss_and_grad, loss_value, ModelParams, ModelSpec};
use crate::objective::{
    mask_capsules, mask_capsules_backward, margin_loss, margin_loss_grad, reconstruction_loss,
    reconstruction_loss_grad, CapsuleSelect, MarginConfig,
};
use crate::ops::{
    conv2d, conv2d_backward, dense, dense_backward, depthwise_conv2d, depthwise_conv2d_backward, elementwise,
    elementwise_backward, matmul_batched, matmul_batched_backward, normalize, normalize_backward, relu,
    relu_backward, softmax, softmax_backward, Elementwise, NormMode,
};
use crate::tensor::Tensor;

type T64 = Tensor<f64>;
type ForwardFn = Box<dyn Fn(&[T64]) -> Result<T64> + Send + Sync>;
type BackwardFn = Box<dyn Fn(&[T64], &T64) -> Result<Vec<T64>> + Send + Sync>;

/// An operation with inputs and a vector-Jacobian product to verify.
pub trait Differentiable: Send + Sync {
    fn name(&self) -> &str;
    /// Point at which the gradient is checked.
    fn inputs(&self) -> &[T64];
    fn forward(&self, inputs: &[T64]) -> Result<T64>;
    /// Gradients with respect to every input given the output cotangent.
    fn backward(&self, inputs: &[T64], grad_out: &T64) -> Result<Vec<T64>>;
}

pub struct OpCase {
    name: String,
    inputs: Vec<T64>,
    forward: ForwardFn,
    backward: BackwardFn,
}

impl OpCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<T64>,
        forward: impl Fn(&[T64]) -> Result<T64> + Send + Sync + 'static,
        backward: impl Fn(&[T64], &T64) -> Result<Vec<T64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            forward: Box::new(forward),
            backward: Box::new(backward),
        }
    }
}

impl Differentiable for OpCase {
    fn name(&self) -> &str {
        &self.name
    }

    fn inputs(&self) -> &[T64] {
        &self.inputs
    }

    fn forward(&self, inputs: &[T64]) -> Result<T64> {
        (self.forward)(inputs)
    }

    fn backward(&self, inputs: &[T64], grad_out: &T64) -> Result<Vec<T64>> {
        (self.backward)(inputs, grad_out)
    }
}

/// Wraps an operation and scales its first gradient by `1 + 1e-2`.
pub struct Corrupted(pub Box<dyn Differentiable>);

impl Differentiable for Corrupted {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn inputs(&self) -> &[T64] {
        self.0.inputs()
    }

    fn forward(&self, inputs: &[T64]) -> Result<T64> {
        self.0.forward(inputs)
    }

    fn backward(&self, inputs: &[T64], grad_out: &T64) -> Result<Vec<T64>> {
        let mut g = self.0.backward(inputs, grad_out)?;
        if let Some(first) = g.first_mut() {
            *first = first.map(|v| v * 1.01);
        }
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Probed entries per input tensor (all entries of smaller tensors).
    pub probes: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes: 20,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub probe_count: usize,
    /// `(input index, flat index)` of the worst probe.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

const RETRY_SCALES: [f64; 4] = [0.1, 0.01, 10.0, 100.0];

fn contract(y: &T64, proj: &T64) -> f64 {
    y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

pub fn finite_difference_check(op: &dyn Differentiable, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let name = op.name().to_string();
    let mut x = op.inputs().to_vec();
    let y = op.forward(&x)?;
    if !y.is_finite() {
        return Err(Error::Numeric(format!("{name}: forward output is not finite")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj = T64::randn(y.shape(), 1.0, &mut rng);
    let grads = op.backward(&x, &proj)?;
    if grads.len() != x.len() {
        return Err(Error::Dimension(format!(
            "{name}: {} gradients for {} inputs",
            grads.len(),
            x.len()
        )));
    }
    for (i, (g, input)) in grads.iter().zip(&x).enumerate() {
        if g.shape() != input.shape() {
            return Err(Error::Dimension(format!(
                "{name}: gradient {i} has shape {:?}, input has {:?}",
                g.shape(),
                input.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("{name}: gradient {i} is not finite")));
        }
    }

    let mut worst = (0.0f64, (0, 0));
    let mut probe_count = 0;
    for t in 0..x.len() {
        let len = x[t].len();
        let picks = sample(&mut rng, len, cfg.probes.min(len)).into_vec();
        for idx in picks {
            let analytic = grads[t].data()[idx];
            let mut numeric_at = |h: f64| -> Result<f64> {
                let orig = x[t].data()[idx];
                x[t].data_mut()[idx] = orig + h;
                let plus = contract(&op.forward(&x)?, &proj);
                x[t].data_mut()[idx] = orig - h;
                let minus = contract(&op.forward(&x)?, &proj);
                x[t].data_mut()[idx] = orig;
                let n = (plus - minus) / (2.0 * h);
                if n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::Numeric(format!("{name}: non-finite difference at input {t}[{idx}]")))
                }
            };
            let mut err = relative_error(analytic, numeric_at(cfg.step)?);
            for scale in RETRY_SCALES {
                if err <= cfg.tolerance {
                    break;
                }
                err = err.min(relative_error(analytic, numeric_at(cfg.step * scale)?));
            }
            probe_count += 1;
            if err > worst.0 {
                worst = (err, (t, idx));
            }
        }
    }
    Ok(GradCheckReport {
        op_name: name,
        max_rel_error: worst.0,
        probe_count,
        worst: worst.1,
        tolerance: cfg.tolerance,
    })
}

fn caps_of(t: &T64) -> Result<CapsTensor<f64>> {
    CapsTensor::new(t.clone())
}

fn scaled(grads: Vec<T64>, g: &T64) -> Vec<T64> {
    let s = g.data()[0];
    grads.into_iter().map(|t| t.map(|v| v * s)).collect()
}

/// Values bounded away from zero so that ReLU probes never cross the kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    T64::randn(shape, 1.0, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn elementwise_case(name: &str, f: Elementwise, input: T64) -> OpCase {
    OpCase::new(
        name,
        vec![input],
        move |x| Ok(elementwise(&x[0], f)),
        move |x, g| {
            let y = elementwise(&x[0], f);
            Ok(vec![elementwise_backward(&x[0], &y, f, g)?])
        },
    )
}

fn norm_case(name: &str, mode: NormMode, rng: &mut ChaCha8Rng) -> OpCase {
    let inputs = vec![
        T64::randn(&[3, 3, 2, 4], 1.0, rng),
        T64::uniform(&[4], 0.5, 1.5, rng),
        T64::randn(&[4], 0.5, rng),
    ];
    OpCase::new(
        name,
        inputs,
        move |x| Ok(normalize(&x[0], &x[1], &x[2], mode, None, true)?.output),
        move |x, g| {
            let out = normalize(&x[0], &x[1], &x[2], mode, None, true)?;
            let grads = normalize_backward(&out.cache, &x[1], g)?;
            Ok(vec![grads.input, grads.gamma, grads.beta])
        },
    )
}

fn conv_case(name: &str, input: [usize; 4], kernel: [usize; 4], stride: usize, rng: &mut ChaCha8Rng) -> OpCase {
    let inputs = vec![
        T64::randn(&input, 1.0, rng),
        T64::randn(&kernel, 0.5, rng),
        T64::randn(&[kernel[3]], 0.5, rng),
    ];
    OpCase::new(
        name,
        inputs,
        move |x| conv2d(&x[0], &x[1], &x[2], stride),
        move |x, g| {
            let c = conv2d_backward(&x[0], &x[1], stride, g, true)?;
            Ok(vec![c.input.expect("requested"), c.kernel, c.bias])
        },
    )
}

fn depthwise_case(name: &str, input: [usize; 4], kernel: [usize; 3], stride: usize, rng: &mut ChaCha8Rng) -> OpCase {
    let inputs = vec![
        T64::randn(&input, 1.0, rng),
        T64::randn(&kernel, 0.5, rng),
        T64::randn(&[kernel[2]], 0.5, rng),
    ];
    OpCase::new(
        name,
        inputs,
        move |x| depthwise_conv2d(&x[0], &x[1], &x[2], stride),
        move |x, g| {
            let c = depthwise_conv2d_backward(&x[0], &x[1], stride, g, true)?;
            Ok(vec![c.input.expect("requested"), c.kernel, c.bias])
        },
    )
}

/// Lengths in `(0, 1)` kept clear of the margins.
fn margin_lengths(n: usize, classes: usize, cfg: &MarginConfig, rng: &mut ChaCha8Rng) -> T64 {
    T64::uniform(&[n, classes], 0.02, 0.98, rng).map(|v| {
        let mut v = v;
        for m in [cfg.m_plus, cfg.m_minus] {
            if (v - m).abs() < 0.02 {
                v = m + 0.03;
            }
        }
        v
    })
}

fn synthetic_batch(spec: &ModelSpec, classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch<f64>> {
    let [h, w, _] = spec.input_shape;
    let samples: Vec<Sample> = classes
        .iter()
        .map(|&c| Sample {
            image: T64::uniform(&[h * w], 0.0, 1.0, rng).data().iter().map(|&v| v as f32).collect(),
            classes: vec![c],
            aux: None,
        })
        .collect();
    Ok(Batch::from_samples(&samples, h, spec.num_classes())?.cast())
}

/// Total training loss of a model preset with respect to every parameter.
pub fn model_case(name: &str, spec: ModelSpec, classes: &[usize], seed: u64) -> Result<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::<f64>::init(&spec, &mut rng)?;
    let batch = synthetic_batch(&spec, classes, &mut rng)?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let running = params.running().to_vec();
    let inputs: Vec<T64> = params.iter().map(|(_, t)| t.clone()).collect();
    let rebuild = move |x: &[T64]| {
        ModelParams::from_parts(names.iter().cloned().zip(x.iter().cloned()).collect(), running.clone())
    };
    let rebuild2 = rebuild.clone();
    let (spec2, batch2) = (spec.clone(), batch.clone());
    Ok(OpCase::new(
        name,
        inputs,
        move |x| Ok(T64::scalar(loss_value(&spec, &rebuild(x)?, &batch)?.total)),
        move |x, g| {
            let (_, grads, _) = loss_and_grad(&spec2, &rebuild2(x)?, &batch2)?;
            Ok(scaled(grads.tensors.into_iter().map(|(_, t)| t).collect(), g))
        },
    )
    )
}

/// Every registered operation, each exactly once, ending with the full
/// MNIST model loss.
pub fn registry(seed: u64) -> Result<Vec<Box<dyn Differentiable>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut ops: Vec<Box<dyn Differentiable>> = Vec::new();

    ops.push(Box::new(conv_case("conv2d", [2, 5, 5, 3], [3, 3, 3, 4], 1, rng)));
    ops.push(Box::new(conv_case("conv2d_strided", [2, 7, 7, 2], [3, 3, 2, 3], 2, rng)));
    ops.push(Box::new(depthwise_case("depthwise_conv2d", [2, 5, 5, 3], [3, 3, 3], 1, rng)));
    ops.push(Box::new(depthwise_case("depthwise_conv2d_full_span", [2, 4, 4, 3], [4, 4, 3], 1, rng)));
    ops.push(Box::new(norm_case("batch_norm", NormMode::Batch, rng)));
    ops.push(Box::new(norm_case("instance_norm", NormMode::Instance, rng)));

    ops.push(Box::new(OpCase::new(
        "dense",
        vec![T64::randn(&[3, 5], 1.0, rng), T64::randn(&[5, 4], 0.5, rng), T64::randn(&[4], 0.5, rng)],
        |x| dense(&x[0], &x[1], &x[2]),
        |x, g| {
            let d = dense_backward(&x[0], &x[1], g)?;
            Ok(vec![d.input, d.weight, d.bias])
        },
    )));
    ops.push(Box::new(OpCase::new(
        "matmul_batched",
        vec![T64::randn(&[2, 3, 4], 1.0, rng), T64::randn(&[2, 4, 5], 1.0, rng)],
        |x| matmul_batched(&x[0], &x[1]),
        |x, g| {
            let (a, b) = matmul_batched_backward(&x[0], &x[1], g)?;
            Ok(vec![a, b])
        },
    )));
    ops.push(Box::new(OpCase::new(
        "relu",
        vec![off_zero(&[3, 7], rng)],
        |x| Ok(relu(&x[0])),
        |x, g| Ok(vec![relu_backward(&x[0], g)?]),
    )));
    ops.push(Box::new(elementwise_case("sigmoid", Elementwise::Sigmoid, T64::randn(&[3, 7], 2.0, rng))));
    ops.push(Box::new(elementwise_case("exp", Elementwise::Exp, T64::randn(&[3, 7], 1.0, rng))));
    ops.push(Box::new(OpCase::new(
        "softmax",
        vec![T64::randn(&[2, 5, 3], 1.0, rng)],
        |x| softmax(&x[0], 1),
        |x, g| Ok(vec![softmax_backward(&softmax(&x[0], 1)?, g, 1)?]),
    )));

    ops.push(Box::new(OpCase::new(
        "squash",
        vec![T64::randn(&[2, 3, 4], 1.0, rng)],
        |x| Ok(squash(&caps_of(&x[0])?).into_values()),
        |x, g| Ok(vec![squash_backward(&caps_of(&x[0])?, g)?]),
    )));
    ops.push(Box::new(OpCase::new(
        "capsule_lengths",
        vec![T64::randn(&[2, 3, 4], 1.0, rng)],
        |x| Ok(caps_of(&x[0])?.lengths()),
        |x, g| Ok(vec![caps_of(&x[0])?.lengths_backward(g)?]),
    )));
    ops.push(Box::new(OpCase::new(
        "caps_predict",
        vec![T64::randn(&[2, 3, 4], 1.0, rng), T64::randn(&[3, 2, 4, 5], 0.5, rng)],
        |x| predict(&caps_of(&x[0])?, &x[1]),
        |x, g| {
            let (du, dw) = predict_backward(&caps_of(&x[0])?, &x[1], g)?;
            Ok(vec![du, dw])
        },
    )));
    ops.push(Box::new(OpCase::new(
        "attention_scores",
        vec![T64::randn(&[2, 3, 2, 5], 1.0, rng)],
        |x| attention_scores(&x[0], 4),
        |x, g| Ok(vec![attention_scores_backward(&x[0], 4, g)?]),
    )));
    ops.push(Box::new(OpCase::new(
        "coupling_softmax",
        vec![T64::randn(&[2, 3, 3, 4], 1.0, rng)],
        |x| coupling(&x[0]),
        |x, g| Ok(vec![coupling_backward(&coupling(&x[0])?, g)?]),
    )));
    ops.push(Box::new(OpCase::new(
        "caps_dense",
        vec![
            T64::randn(&[2, 4, 3], 0.5, rng),
            T64::randn(&[4, 3, 3, 5], 0.5, rng),
            T64::randn(&[4, 3], 0.3, rng),
        ],
        |x| {
            let p = CapsDenseParams::new(x[1].clone(), x[2].clone())?;
            Ok(caps_dense_forward(&caps_of(&x[0])?, &p)?.0.into_values())
        },
        |x, g| {
            let u = caps_of(&x[0])?;
            let p = CapsDenseParams::new(x[1].clone(), x[2].clone())?;
            let (_, trace) = caps_dense_forward(&u, &p)?;
            let d = caps_dense_backward(&u, &p, &trace, g)?;
            Ok(vec![d.input, d.w, d.b])
        },
    )));
    ops.push(Box::new(OpCase::new(
        "mask_capsules",
        vec![T64::randn(&[3, 4, 2], 1.0, rng)],
        |x| Ok(mask_capsules(&caps_of(&x[0])?, &CapsuleSelect::ByTarget(vec![1, 3, 0]))?.0),
        |x, g| Ok(vec![mask_capsules_backward(&caps_of(&x[0])?, &[1, 3, 0], g)?]),
    )));

    let margin = MarginConfig::default();
    let targets = Tensor::new(&[3, 4], vec![1., 0., 0., 0., 0., 1., 1., 0., 0., 0., 0., 1.])?;
    let targets2 = targets.clone();
    ops.push(Box::new(OpCase::new(
        "margin_loss",
        vec![margin_lengths(3, 4, &margin, rng)],
        move |x| Ok(T64::scalar(margin_loss(&x[0], &targets, &margin)?)),
        move |x, g| Ok(scaled(vec![margin_loss_grad(&x[0], &targets2, &margin)?], g)),
    )));
    ops.push(Box::new(OpCase::new(
        "reconstruction_loss",
        vec![T64::uniform(&[3, 6], 0.0, 1.0, rng), T64::uniform(&[3, 6], 0.0, 1.0, rng)],
        |x| Ok(T64::scalar(reconstruction_loss(&x[0], &x[1])?)),
        |x, g| {
            let da = reconstruction_loss_grad(&x[0], &x[1])?;
            let db = da.map(|v| -v);
            Ok(scaled(vec![da, db], g))
        },
    )));

    ops.push(Box::new(model_case("mnist_total_loss", build_mnist_spec(), &[3, 7], seed)?));
    Ok(ops)
}

/// Runs every registered check. `fault` names an operation whose gradient
/// is deliberately corrupted, as a negative control.
pub fn run_suite(cfg: &GradCheckConfig, fault: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let mut ops = registry(cfg.seed)?;
    if let Some(target) = fault {
        let pos = ops
            .iter()
            .position(|op| op.name() == target)
            .ok_or_else(|| Error::Argument(format!("no registered operation named '{target}'")))?;
        let op = ops.remove(pos);
        ops.insert(pos, Box::new(Corrupted(op)));
    }
    ops.iter().map(|op| finite_difference_check(op.as_ref(), cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> OpCase {
        OpCase::new(
            "square",
            vec![T64::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()],
            |x| Ok(x[0].map(|v| v * v)),
            |x, g| Ok(vec![x[0].zip_map(g, |v, g| 2.0 * v * g)?]),
        )
    }

    #[test]
    fn exact_gradient_passes_and_probes_small_tensors_fully() {
        let r = finite_difference_check(&quadratic(), &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.probe_count, 3);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = finite_difference_check(&Corrupted(Box::new(quadratic())), &GradCheckConfig::default()).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error - 0.01 / 1.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let op = OpCase::new(
            "log_of_negative",
            vec![T64::new(&[1], vec![-1.0]).unwrap()],
            |x| Ok(x[0].map(f64::ln)),
            |x, g| Ok(vec![g.zip_map(&x[0], |g, v| g / v)?]),
        );
        assert!(matches!(
            finite_difference_check(&op, &GradCheckConfig::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }

    #[test]
    fn small_ops_pass() {
        let cfg = GradCheckConfig::default();
        for op in registry(1).unwrap().iter().filter(|op| op.name() != "mnist_total_loss") {
            let r = finite_difference_check(op.as_ref(), &cfg).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
