//! Capsule networks with non-iterative self-attention routing.
//!
//! The crate covers the full loop: dense tensor kernels with hand-written
//! backward passes ([`ops`]), capsule layers and routing ([`caps`]), margin
//! and reconstruction objectives ([`objective`]), the MNIST / MultiMNIST
//! model presets ([`model`]), IDX ingestion and MultiMNIST synthesis
//! ([`data`]), Adam training with checkpoints ([`train`]) and the
//! introspection suite: parameter/operation census, perturbation
//! reconstructions and PCA equivariance ([`analysis`]).
//!
//! Layout is row-major and channels-last (`[N, H, W, C]`) everywhere.

pub mod analysis;
pub mod caps;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
