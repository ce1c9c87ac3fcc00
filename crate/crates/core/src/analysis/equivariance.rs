//! How linearly output capsules move under input transformations.
//!
//! For each test image a family of transformed copies is pushed through the
//! network, the output capsule of the true class is collected for each copy,
//! and the spectrum of the centred covariance `C = (1/K) sum z zᵀ` is
//! summarised by `r = λ₁ / Σ λ` and the cumulative explained variance.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{rotate, shift};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, ForwardOptions, ModelParams, ModelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFamily {
    TranslateX,
    TranslateY,
    Rotate,
    /// i.i.d. standard-normal vectors in place of network outputs.
    Random,
}

impl TransformFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "translate_x" => Ok(Self::TranslateX),
            "translate_y" => Ok(Self::TranslateY),
            "rotate" => Ok(Self::Rotate),
            "random" => Ok(Self::Random),
            other => Err(Error::Argument(format!(
                "unknown transform family '{other}' (translate_x, translate_y, rotate, random)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TranslateX => "translate_x",
            Self::TranslateY => "translate_y",
            Self::Rotate => "rotate",
            Self::Random => "random",
        }
    }

    /// Shifts in pixels or angles in degrees, in sweep order.
    pub fn steps(self) -> Vec<f64> {
        match self {
            Self::TranslateX | Self::TranslateY => (-5..=5).map(f64::from).collect(),
            Self::Rotate | Self::Random => (-25..=25).map(f64::from).collect(),
        }
    }
}

/// Which capsule values form one observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapsuleView {
    /// The capsule of the true class.
    CorrectClass,
    /// Every output capsule, concatenated.
    Concatenated,
}

/// Transformed copies of a single-channel image, `[K, H, W, 1]`.
pub fn transform_sweep(image: &[f32], h: usize, w: usize, family: TransformFamily) -> Result<Tensor<f32>> {
    if image.len() != h * w {
        return Err(Error::Argument(format!("image has {} pixels, expected {h}x{w}", image.len())));
    }
    let steps = family.steps();
    let mut data = Vec::with_capacity(steps.len() * h * w);
    for &s in &steps {
        let out = match family {
            TransformFamily::TranslateX => shift(image, h, w, s as i32, 0),
            TransformFamily::TranslateY => shift(image, h, w, 0, s as i32),
            TransformFamily::Rotate => rotate(image, h, w, s),
            TransformFamily::Random => {
                return Err(Error::Argument("the random family has no image transform".into()))
            }
        };
        data.extend(out);
    }
    Tensor::new(&[steps.len(), h, w, 1], data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    /// Covariance eigenvalues, largest first.
    pub eigenvalues: Vec<f64>,
    pub r: f64,
    pub cumulative: Vec<f64>,
}

/// Spectrum of the `1/K`-normalised covariance of centred observations.
/// A zero covariance is a degenerate-input error.
pub fn spectrum(observations: &[Vec<f64>]) -> Result<Spectrum> {
    let k = observations.len();
    let dim = observations.first().map_or(0, Vec::len);
    if k == 0 || dim == 0 || observations.iter().any(|o| o.len() != dim) {
        return Err(Error::Argument("observations must be non-empty and equally sized".into()));
    }
    let mut mean = vec![0.0; dim];
    for o in observations {
        mean.iter_mut().zip(o).for_each(|(m, v)| *m += v / k as f64);
    }
    let z = DMatrix::from_fn(k, dim, |i, j| observations[i][j] - mean[j]);
    let cov = (z.transpose() * &z) / k as f64;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eigenvalues.iter().sum();
    let scale = eigenvalues.first().map_or(0.0, |v| v.abs());
    if !(total > 0.0) || scale == 0.0 {
        return Err(Error::Numeric("zero covariance: all observations coincide".into()));
    }
    let mut acc = 0.0;
    let cumulative = eigenvalues
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    Ok(Spectrum {
        r: eigenvalues[0] / total,
        eigenvalues,
        cumulative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivarianceResult {
    pub family: TransformFamily,
    /// Mean first-eigenvalue ratio.
    pub r: f64,
    /// Mean cumulative explained variance by component count.
    pub cumulative_variance: Vec<f64>,
    pub samples: usize,
    /// Inputs skipped because every transformed copy gave the same output.
    pub degenerate: usize,
}

fn average(family: TransformFamily, spectra: Vec<Result<Spectrum>>) -> Result<EquivarianceResult> {
    let mut degenerate = 0;
    let mut kept = Vec::new();
    for s in spectra {
        match s {
            Ok(s) => kept.push(s),
            Err(Error::Numeric(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::Numeric(format!("all {degenerate} inputs were degenerate")));
    }
    let n = kept.len() as f64;
    let dim = kept[0].cumulative.len();
    let mut cumulative_variance = vec![0.0; dim];
    let mut r = 0.0;
    for s in &kept {
        r += s.r / n;
        cumulative_variance.iter_mut().zip(&s.cumulative).for_each(|(a, v)| *a += v / n);
    }
    Ok(EquivarianceResult {
        family,
        r,
        cumulative_variance,
        samples: kept.len(),
        degenerate,
    })
}

/// Reference level for unstructured outputs: `k` i.i.d. standard-normal
/// `dim`-vectors per repetition.
pub fn random_baseline(dim: usize, k: usize, repetitions: usize, seed: u64) -> Result<EquivarianceResult> {
    let spectra = (0..repetitions)
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64));
            let obs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            spectrum(&obs)
        })
        .collect();
    average(TransformFamily::Random, spectra)
}

/// Capsule observations for one image under every step of `family`.
pub fn sweep_observations(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    image: &[f32],
    label: usize,
    family: TransformFamily,
    view: CapsuleView,
) -> Result<Vec<Vec<f64>>> {
    let [h, w, _] = spec.input_shape;
    let batch = transform_sweep(image, h, w, family)?;
    let out = forward(spec, params, &batch, &ForwardOptions::inference())?;
    let caps = &out.caps;
    Ok((0..caps.batch())
        .map(|i| match view {
            CapsuleView::CorrectClass => caps.capsule(i, label).iter().map(|&v| v as f64).collect(),
            CapsuleView::Concatenated => (0..caps.count())
                .flat_map(|c| caps.capsule(i, c).iter().map(|&v| v as f64))
                .collect(),
        })
        .collect())
}

/// Mean spectrum statistics over the first `limit` images of `data`.
pub fn pca_equivariance(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    data: &Dataset,
    family: TransformFamily,
    view: CapsuleView,
    limit: usize,
    strict: bool,
) -> Result<EquivarianceResult> {
    if family == TransformFamily::Random {
        return Err(Error::Argument("use random_baseline for the random family".into()));
    }
    let n = limit.min(data.len());
    let one = |i: usize| -> Result<Spectrum> {
        spectrum(&sweep_observations(spec, params, data.image(i), data.label(i), family, view)?)
    };
    // collected in index order, so the average is the same either way
    let spectra: Vec<Result<Spectrum>> = if strict {
        (0..n).map(one).collect()
    } else {
        (0..n).into_par_iter().map(one).collect()
    };
    average(family, spectra)
}
