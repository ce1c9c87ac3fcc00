use rayon::prelude::*;
use serde::Serialize;

use crate::data::{epoch_stream, Batch, Dataset, Sample, StreamMode};
use crate::error::{Error, Result};
use crate::model::{predict_lengths, ModelParams, ModelSpec};

/// The `k` longest capsules, longest first; ties go to the lower index.
pub fn top_k(lengths: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.sort_by(|&a, &b| lengths[b].total_cmp(&lengths[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Whether the top-`k` set equals the label set.
pub fn is_correct(lengths: &[f32], labels: &[usize], k: usize) -> bool {
    let mut predicted = top_k(lengths, k);
    predicted.sort_unstable();
    let mut expected = labels.to_vec();
    expected.sort_unstable();
    predicted == expected
}

/// Output lengths of every item of an evaluation stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub classes: usize,
    /// Row-major `[N, classes]`.
    pub lengths: Vec<f32>,
    pub labels: Vec<Vec<usize>>,
}

impl Scored {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.lengths[i * self.classes..(i + 1) * self.classes]
    }

    pub fn report(&self, k: usize) -> EvalReport {
        let wrong = (0..self.len())
            .filter(|&i| !is_correct(self.row(i), &self.labels[i], k))
            .count();
        EvalReport {
            wrong,
            total: self.len(),
            error: if self.is_empty() { 0.0 } else { wrong as f64 / self.len() as f64 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub wrong: usize,
    pub total: usize,
    pub error: f64,
}

/// Inference-mode lengths over an unshuffled stream. Chunks are scored in
/// parallel unless `strict`; results are identical either way.
pub fn score(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    data: &Dataset,
    mode: &StreamMode,
    seed: u64,
    batch_size: usize,
    strict: bool,
) -> Result<Scored> {
    let classes = spec.num_classes();
    let stream = epoch_stream(data, mode.clone(), classes, seed, 0, batch_size, false)?;
    let side = stream.side();
    if [side, side, 1] != spec.input_shape {
        return Err(Error::Config(format!(
            "model '{}' expects {:?} inputs, the data stream yields {side}x{side}",
            spec.name, spec.input_shape
        )));
    }
    let starts: Vec<usize> = (0..stream.len()).step_by(batch_size).collect();
    let run = |&start: &usize| -> Result<(Vec<f32>, Vec<Vec<usize>>)> {
        let end = (start + batch_size).min(stream.len());
        let samples: Vec<Sample> = (start..end).map(|p| stream.sample(p)).collect();
        let batch = Batch::from_samples(&samples, side, classes)?;
        let lengths = predict_lengths(spec, params, &batch.images, batch_size)?;
        Ok((lengths.into_data(), batch.labels))
    };
    let parts: Vec<_> = if strict {
        starts.iter().map(run).collect::<Result<_>>()?
    } else {
        starts.par_iter().map(run).collect::<Result<_>>()?
    };
    let mut out = Scored {
        classes,
        lengths: Vec::with_capacity(stream.len() * classes),
        labels: Vec::with_capacity(stream.len()),
    };
    for (l, y) in parts {
        out.lengths.extend(l);
        out.labels.extend(y);
    }
    Ok(out)
}

/// Top-`k` error rate over an unshuffled stream.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams<f32>,
    data: &Dataset,
    mode: &StreamMode,
    seed: u64,
    k: usize,
    strict: bool,
) -> Result<EvalReport> {
    Ok(score(spec, params, data, mode, seed, 100, strict)?.report(k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub error: f64,
    pub wrong: usize,
    pub total: usize,
    /// Indices of members whose accuracy exceeded the threshold.
    pub admitted: Vec<usize>,
    pub member_errors: Vec<f64>,
}

/// Averages the length vectors of every member whose accuracy exceeds
/// `threshold`, then scores the mean by top-`k`.
pub fn ensemble_predict(members: &[Scored], threshold: f64, k: usize) -> Result<EnsembleReport> {
    let member_errors: Vec<f64> = members.iter().map(|m| m.report(k).error).collect();
    let admitted: Vec<usize> = (0..members.len())
        .filter(|&i| 1.0 - member_errors[i] > threshold)
        .collect();
    let Some(&first) = admitted.first() else {
        return Err(Error::Argument(format!(
            "no model exceeds accuracy {threshold} (member errors {member_errors:?})"
        )));
    };
    let reference = &members[first];
    for &i in &admitted {
        if members[i].labels != reference.labels || members[i].classes != reference.classes {
            return Err(Error::Argument("ensemble members were scored on different data".into()));
        }
    }
    let scale = 1.0 / admitted.len() as f32;
    let mut mean = vec![0.0f32; reference.lengths.len()];
    for &i in &admitted {
        for (acc, &v) in mean.iter_mut().zip(&members[i].lengths) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v *= scale);
    let report = Scored {
        classes: reference.classes,
        lengths: mean,
        labels: reference.labels.clone(),
    }
    .report(k);
    Ok(EnsembleReport {
        error: report.error,
        wrong: report.wrong,
        total: report.total,
        admitted,
        member_errors,
    })
}
