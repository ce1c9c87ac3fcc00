//! Operation counts for a single image.
//!
//! One multiply-accumulate is two operations. Normalisation, activations,
//! softmax, squash and the other elementwise steps cost one operation per
//! element they produce.

use serde::Serialize;

use crate::error::Result;
use crate::model::{count_params, ModelSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OpsRow {
    pub layer: String,
    pub macs: u64,
    pub elementwise: u64,
}

impl OpsRow {
    pub fn ops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OpsReport {
    pub rows: Vec<OpsRow>,
    pub total_macs: u64,
    pub total_ops: u64,
    /// Trainable parameters without the decoder.
    pub params: usize,
    pub decoder_params: usize,
    /// Decoder cost, not part of the totals.
    pub decoder_ops: u64,
}

impl OpsReport {
    pub fn giga_ops(&self) -> f64 {
        self.total_ops as f64 / 1e9
    }
}

fn row(layer: impl Into<String>, macs: usize, elementwise: usize) -> OpsRow {
    OpsRow {
        layer: layer.into(),
        macs: macs as u64,
        elementwise: elementwise as u64,
    }
}

/// MACs of a dense convolution producing an `oh x ow x cout` map.
pub fn conv_macs(kernel: usize, cin: usize, cout: usize, oh: usize, ow: usize) -> usize {
    kernel * kernel * cin * cout * oh * ow
}

pub fn count_ops(spec: &ModelSpec) -> Result<OpsReport> {
    let census = count_params(spec)?;
    let trace = spec.spatial_trace()?;
    let mut rows = Vec::new();
    for (i, layer) in spec.conv_stack.iter().enumerate() {
        let (_, _, cin) = trace[i];
        let (oh, ow, cout) = trace[i + 1];
        let outputs = oh * ow * cout;
        rows.push(row(format!("conv{i}"), conv_macs(layer.kernel, cin, cout, oh, ow), 0));
        rows.push(row(format!("relu{i}"), 0, outputs));
        rows.push(row(format!("norm{i}"), 0, outputs));
    }
    let (h, w, f) = spec.feature_map()?;
    rows.push(row("primary", h * w * f, 0));
    rows.push(row("primary.squash", 0, f));

    let mut lower = spec.primary;
    for (i, upper) in spec.caps_dense.iter().enumerate() {
        let (nl, dl, nl1, dl1) = (lower.count, lower.dim, upper.count, upper.dim);
        rows.push(row(format!("caps{i}.predict"), nl * nl1 * dl * dl1, 0));
        // pairwise agreement plus its sum over the partner capsule
        rows.push(row(format!("caps{i}.attention"), nl * nl * nl1 * dl1, nl * nl * nl1));
        rows.push(row(format!("caps{i}.coupling"), 0, nl * nl1));
        rows.push(row(format!("caps{i}.sum"), nl * nl1 * dl1, nl * nl1));
        rows.push(row(format!("caps{i}.squash"), 0, nl1 * dl1));
        lower = *upper;
    }

    let decoder_ops = spec.decoder.as_ref().map_or(0, |dec| {
        let mut width = lower.count * lower.dim;
        let mut ops = 0u64;
        for &out in dec.hidden.iter().chain(std::iter::once(&dec.output)) {
            ops += 2 * (width * out) as u64 + out as u64;
            width = out;
        }
        ops
    });
    let total_macs = rows.iter().map(|r| r.macs).sum();
    let total_ops = rows.iter().map(OpsRow::ops).sum();
    Ok(OpsReport {
        rows,
        total_macs,
        total_ops,
        params: census.total,
        decoder_params: census.decoder,
        decoder_ops,
    })
}
