//! Network description, parameters and the end-to-end passes.

pub mod network;
pub mod params;
pub mod spec;

use serde::Serialize;

pub use network::{
    apply_norm_stats, backward, decode, forward, loss_and_grad, loss_value, predict_lengths, ForwardOptions, ForwardOutput,
    Reconstruct,
};
pub use params::{ModelGrads, ModelParams};
pub use spec::{build_mnist_spec, build_multimnist_spec, CapsLayerSpec, ConvLayerSpec, DecoderSpec, ModelSpec};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CensusRow {
    pub layer: String,
    pub params: usize,
}

/// Trainable scalar counts per layer. The decoder is an auxiliary head and
/// is kept out of `total`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub rows: Vec<CensusRow>,
    pub total: usize,
    pub decoder: usize,
}

pub fn count_params(spec: &ModelSpec) -> Result<ParamCensus> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut channels = spec.input_shape[2];
    for (i, layer) in spec.conv_stack.iter().enumerate() {
        rows.push(CensusRow {
            layer: format!("conv{i}"),
            params: layer.kernel * layer.kernel * channels * layer.filters + layer.filters,
        });
        rows.push(CensusRow {
            layer: format!("norm{i}"),
            params: 2 * layer.filters,
        });
        channels = layer.filters;
    }
    let (h, w, f) = spec.feature_map()?;
    rows.push(CensusRow {
        layer: "primary".into(),
        params: h * w * f + f,
    });
    let mut lower = spec.primary;
    for (i, upper) in spec.caps_dense.iter().enumerate() {
        rows.push(CensusRow {
            layer: format!("caps{i}.w"),
            params: lower.count * upper.count * lower.dim * upper.dim,
        });
        rows.push(CensusRow {
            layer: format!("caps{i}.b"),
            params: lower.count * upper.count,
        });
        lower = *upper;
    }
    let total = rows.iter().map(|r| r.params).sum();
    let decoder = spec.decoder.as_ref().map_or(0, |dec| {
        let mut width = lower.count * lower.dim;
        let mut n = 0;
        for &out in dec.hidden.iter().chain(std::iter::once(&dec.output)) {
            n += width * out + out;
            width = out;
        }
        n
    });
    Ok(ParamCensus { rows, total, decoder })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mnist_census_rows() {
        let c = count_params(&build_mnist_spec()).unwrap();
        let get = |name: &str| c.rows.iter().find(|r| r.layer == name).unwrap().params;
        assert_eq!(get("conv0"), 832);
        assert_eq!(get("conv1"), 18_496);
        assert_eq!(get("conv2"), 36_928);
        assert_eq!(get("conv3"), 73_856);
        assert_eq!(get("primary"), 10_496);
        assert_eq!(get("caps0.w"), 20_480);
        assert_eq!(get("caps0.b"), 160);
        assert_eq!(c.total, 161_824);
        assert_eq!(c.decoder, 160 * 512 + 512 + 512 * 1024 + 1024 + 1024 * 784 + 784);
    }

    #[test]
    fn census_matches_initialised_params() {
        for spec in [build_mnist_spec(), build_multimnist_spec()] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = ModelParams::<f32>::init(&spec, &mut rng).unwrap();
            let c = count_params(&spec).unwrap();
            assert_eq!(p.without_decoder().scalar_count(), c.total);
            assert_eq!(p.scalar_count(), c.total + c.decoder);
        }
    }

    #[test]
    fn multimnist_census_total() {
        assert_eq!(count_params(&build_multimnist_spec()).unwrap().total, 154_656);
    }
}
