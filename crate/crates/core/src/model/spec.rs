use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::MarginConfig;
use crate::ops::conv::ConvGeometry;
use crate::ops::NormMode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub norm: NormMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsLayerSpec {
    pub count: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// ReLU hidden widths.
    pub hidden: Vec<usize>,
    /// Sigmoid output width; equals the input pixel count.
    pub output: usize,
}

/// Declarative description of a capsule network.
///
/// Convolutions (conv, ReLU, normalisation) feed a depthwise primary-capsule
/// layer spanning the final feature map; fully connected capsule layers with
/// self-attention routing follow, the last one having one capsule per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `(H, W, C)`.
    pub input_shape: [usize; 3],
    pub conv_stack: Vec<ConvLayerSpec>,
    pub primary: CapsLayerSpec,
    pub caps_dense: Vec<CapsLayerSpec>,
    pub decoder: Option<DecoderSpec>,
    pub loss: MarginConfig,
}

fn conv(kernel: usize, filters: usize, stride: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        kernel,
        filters,
        stride,
        norm: NormMode::Batch,
    }
}

/// 28x28 MNIST: 28 -5-> 24 -3-> 22 -3-> 20 -3/2-> 9, 9x9 depthwise to 16x8
/// primary capsules, one routed layer of 10x16 capsules.
pub fn build_mnist_spec() -> ModelSpec {
    ModelSpec {
        name: "mnist".into(),
        input_shape: [28, 28, 1],
        conv_stack: vec![conv(5, 32, 1), conv(3, 64, 1), conv(3, 64, 1), conv(3, 128, 2)],
        primary: CapsLayerSpec { count: 16, dim: 8 },
        caps_dense: vec![CapsLayerSpec { count: 10, dim: 16 }],
        decoder: Some(DecoderSpec {
            hidden: vec![512, 1024],
            output: 28 * 28,
        }),
        loss: MarginConfig::default(),
    }
}

/// 36x36 MultiMNIST: 36 -5/2-> 16 -3-> 14 -3-> 12 -3/2-> 5, 5x5 depthwise.
///
/// The first convolution is strided so the primary-capsule kernel stays
/// small; the reconstruction weight is shared by two reconstructions.
pub fn build_multimnist_spec() -> ModelSpec {
    ModelSpec {
        name: "multimnist".into(),
        input_shape: [36, 36, 1],
        conv_stack: vec![conv(5, 32, 2), conv(3, 64, 1), conv(3, 64, 1), conv(3, 128, 2)],
        primary: CapsLayerSpec { count: 16, dim: 8 },
        caps_dense: vec![CapsLayerSpec { count: 10, dim: 16 }],
        decoder: Some(DecoderSpec {
            hidden: vec![512, 1024],
            output: 36 * 36,
        }),
        loss: MarginConfig::default(),
    }
}

impl ModelSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(build_mnist_spec()),
            "multimnist" => Ok(build_multimnist_spec()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.caps_dense.last().map_or(self.primary.count, |c| c.count)
    }

    pub fn pixels(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `(H, W, C)` after each convolution, starting with the input.
    pub fn spatial_trace(&self) -> Result<Vec<(usize, usize, usize)>> {
        let [mut h, mut w, mut c] = self.input_shape;
        let mut trace = vec![(h, w, c)];
        for (i, layer) in self.conv_stack.iter().enumerate() {
            let oh = ConvGeometry::output_extent(h, layer.kernel, layer.stride);
            let ow = ConvGeometry::output_extent(w, layer.kernel, layer.stride);
            match (oh, ow) {
                (Some(oh), Some(ow)) => {
                    h = oh;
                    w = ow;
                    c = layer.filters;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "conv layer {i} (k={}, s={}) does not fit a {h}x{w} input",
                        layer.kernel, layer.stride
                    )))
                }
            }
            trace.push((h, w, c));
        }
        Ok(trace)
    }

    /// Feature map consumed by the primary capsules.
    pub fn feature_map(&self) -> Result<(usize, usize, usize)> {
        Ok(*self.spatial_trace()?.last().expect("trace holds the input"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::Config("input extents must be positive".into()));
        }
        let (_, _, f) = self.feature_map()?;
        if f != self.primary.count * self.primary.dim {
            return Err(Error::Config(format!(
                "last convolution has {f} filters, primary capsules need {} x {}",
                self.primary.count, self.primary.dim
            )));
        }
        if self.caps_dense.is_empty() {
            return Err(Error::Config("at least one routed capsule layer is required".into()));
        }
        if let Some(dec) = &self.decoder {
            if dec.output != self.pixels() {
                return Err(Error::Config(format!(
                    "decoder emits {} values for a {}-pixel input",
                    dec.output,
                    self.pixels()
                )));
            }
        }
        self.loss.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_spatial_trace() {
        let spec = build_mnist_spec();
        spec.validate().unwrap();
        let sizes: Vec<usize> = spec.spatial_trace().unwrap().iter().map(|t| t.0).collect();
        assert_eq!(sizes, vec![28, 24, 22, 20, 9]);
        assert_eq!(spec.feature_map().unwrap(), (9, 9, 128));
        assert_eq!(spec.num_classes(), 10);
    }

    #[test]
    fn multimnist_spatial_trace() {
        let spec = build_multimnist_spec();
        spec.validate().unwrap();
        assert_eq!(spec.input_shape, [36, 36, 1]);
        assert_eq!(spec.feature_map().unwrap(), (5, 5, 128));
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut spec = build_mnist_spec();
        spec.primary.dim = 4;
        assert!(spec.validate().is_err());
        let mut spec = build_mnist_spec();
        spec.input_shape = [4, 4, 1];
        assert!(spec.validate().is_err());
        assert!(ModelSpec::by_name("smallnorb").is_err());
    }
}
