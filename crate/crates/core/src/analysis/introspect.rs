//! Perturbation reconstructions and misclassification listings.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{decode, forward, ForwardOptions, ModelParams, ModelSpec};
use crate::tensor::Tensor;
use crate::train::eval::{top_k, Scored};

/// Default perturbation steps: -0.25 to 0.25 in 0.05 increments.
pub fn default_deltas() -> Vec<f32> {
    (0..11).map(|i| (i as f32 - 5.0) * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    /// The longest output capsule, the one that gets perturbed.
    pub class: usize,
    pub dim: usize,
    pub deltas: Vec<f32>,
    /// One decoded image per delta, `[deltas, P]`.
    pub images: Tensor<f32>,
}

/// Adds each delta to one coordinate of the longest capsule and decodes the
/// masked result.
pub fn perturb_reconstruct(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    image: &[f32],
    dim: usize,
    deltas: &[f32],
) -> Result<Perturbation> {
    let [h, w, c] = spec.input_shape;
    if image.len() != h * w * c {
        return Err(Error::Argument(format!("image has {} values, expected {}", image.len(), h * w * c)));
    }
    if deltas.is_empty() {
        return Err(Error::Argument("no perturbation steps given".into()));
    }
    let input = Tensor::new(&[1, h, w, c], image.to_vec())?;
    let out = forward(spec, params, &input, &ForwardOptions::inference())?;
    let d = out.caps.dim();
    if dim >= d {
        return Err(Error::Argument(format!("dimension {dim} out of range for {d}-dimensional capsules")));
    }
    let class = top_k(out.lengths.data(), 1)[0];
    let count = out.caps.count();
    let base = out.caps.capsule(0, class);
    let mut masked = vec![0.0f32; deltas.len() * count * d];
    for (row, delta) in deltas.iter().enumerate() {
        let at = row * count * d + class * d;
        masked[at..at + d].copy_from_slice(base);
        masked[at + dim] += delta;
    }
    let images = decode(spec, params, &Tensor::new(&[deltas.len(), count * d], masked)?)?;
    Ok(Perturbation {
        class,
        dim,
        deltas: deltas.to_vec(),
        images,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Misclassified {
    pub index: usize,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Gap between the longest and second-longest capsule.
    pub margin: f32,
    pub lengths: Vec<f32>,
}

/// Wrong top-`k` predictions, least confident first.
pub fn misclassification_report(scored: &Scored, k: usize) -> Vec<Misclassified> {
    let mut rows: Vec<Misclassified> = (0..scored.len())
        .filter_map(|i| {
            let lengths = scored.row(i);
            let mut predicted = top_k(lengths, k);
            predicted.sort_unstable();
            let mut labels = scored.labels[i].clone();
            labels.sort_unstable();
            if predicted == labels {
                return None;
            }
            let order = top_k(lengths, 2);
            let margin = match order.as_slice() {
                [a, b] => lengths[*a] - lengths[*b],
                _ => lengths[order[0]],
            };
            Some(Misclassified {
                index: i,
                labels,
                predicted,
                margin,
                lengths: lengths.to_vec(),
            })
        })
        .collect();
    rows.sort_by(|a, b| a.margin.total_cmp(&b.margin).then(a.index.cmp(&b.index)));
    rows
}
