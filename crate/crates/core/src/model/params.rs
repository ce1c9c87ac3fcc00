use rand::Rng;

use crate::caps::CapsDenseParams;
use crate::error::{Error, Result};
use crate::model::spec::ModelSpec;
use crate::ops::{NormMode, RunningStats};
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors in a fixed order, plus the running statistics of
/// batch-normalised layers (which are state, not parameters).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    tensors: Vec<(String, Tensor<T>)>,
    running: Vec<(usize, RunningStats<T>)>,
}

pub(crate) fn conv_names(i: usize) -> [String; 4] {
    [
        format!("conv{i}.kernel"),
        format!("conv{i}.bias"),
        format!("norm{i}.gamma"),
        format!("norm{i}.beta"),
    ]
}

pub(crate) fn caps_names(i: usize) -> [String; 2] {
    [format!("caps{i}.w"), format!("caps{i}.b")]
}

pub(crate) fn decoder_names(i: usize) -> [String; 2] {
    [format!("decoder{i}.weight"), format!("decoder{i}.bias")]
}

pub(crate) const PRIMARY_KERNEL: &str = "primary.kernel";
pub(crate) const PRIMARY_BIAS: &str = "primary.bias";

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled normal initialisation (He for ReLU-followed layers),
    /// zero biases, unit norm scales, zero log priors.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut tensors = Vec::new();
        let mut running = Vec::new();
        let mut channels = spec.input_shape[2];
        for (i, layer) in spec.conv_stack.iter().enumerate() {
            let fan_in = layer.kernel * layer.kernel * channels;
            let [k, b, g, be] = conv_names(i);
            tensors.push((
                k,
                Tensor::randn(
                    &[layer.kernel, layer.kernel, channels, layer.filters],
                    (2.0 / fan_in as f64).sqrt(),
                    rng,
                ),
            ));
            tensors.push((b, Tensor::zeros(&[layer.filters])));
            tensors.push((g, Tensor::full(&[layer.filters], T::one())));
            tensors.push((be, Tensor::zeros(&[layer.filters])));
            if layer.norm == NormMode::Batch {
                running.push((i, RunningStats::new(layer.filters)));
            }
            channels = layer.filters;
        }

        let (h, w, f) = spec.feature_map()?;
        tensors.push((
            PRIMARY_KERNEL.to_string(),
            Tensor::randn(&[h, w, f], 1.0 / ((h * w) as f64).sqrt(), rng),
        ));
        tensors.push((PRIMARY_BIAS.to_string(), Tensor::zeros(&[f])));

        let mut lower = spec.primary;
        for (i, upper) in spec.caps_dense.iter().enumerate() {
            let p = CapsDenseParams::<T>::init(lower.count, lower.dim, upper.count, upper.dim, rng);
            let [wn, bn] = caps_names(i);
            tensors.push((wn, p.w));
            tensors.push((bn, p.b));
            lower = *upper;
        }

        if let Some(dec) = &spec.decoder {
            let mut width = lower.count * lower.dim;
            let last = dec.hidden.len();
            for (i, &out) in dec.hidden.iter().chain(std::iter::once(&dec.output)).enumerate() {
                let gain = if i < last { 2.0 } else { 1.0 };
                let [wn, bn] = decoder_names(i);
                tensors.push((wn, Tensor::randn(&[width, out], (gain / width as f64).sqrt(), rng)));
                tensors.push((bn, Tensor::zeros(&[out])));
                width = out;
            }
        }
        Ok(Self { tensors, running })
    }

    pub fn from_parts(tensors: Vec<(String, Tensor<T>)>, running: Vec<(usize, RunningStats<T>)>) -> Result<Self> {
        for (i, (name, t)) in tensors.iter().enumerate() {
            if tensors[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("duplicate parameter name '{name}'")));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter '{name}' is not finite")));
            }
        }
        Ok(Self { tensors, running })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn running(&self) -> &[(usize, RunningStats<T>)] {
        &self.running
    }

    pub fn running_for(&self, layer: usize) -> Option<&RunningStats<T>> {
        self.running.iter().find(|(i, _)| *i == layer).map(|(_, s)| s)
    }

    pub(crate) fn running_for_mut(&mut self, layer: usize) -> Option<&mut RunningStats<T>> {
        self.running.iter_mut().find(|(i, _)| *i == layer).map(|(_, s)| s)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(i, s)| {
                    (
                        *i,
                        RunningStats {
                            mean: s.mean.iter().map(|&x| U::of(x.as_f64())).collect(),
                            var: s.var.iter().map(|&x| U::of(x.as_f64())).collect(),
                            updates: s.updates,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Parameters without the decoder tensors.
    pub fn without_decoder(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| !n.starts_with("decoder"))
                .cloned()
                .collect(),
            running: self.running.clone(),
        }
    }
}

/// Gradients aligned one-to-one with a [`ModelParams`] ordering.
#[derive(Clone, Debug)]
pub struct ModelGrads<T = f32> {
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}
