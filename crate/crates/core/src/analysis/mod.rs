//! Parameter and operation census, perturbation reconstructions, error
//! listings and PCA equivariance measurements.

pub mod census;
pub mod equivariance;
pub mod introspect;
pub mod io;

pub use census::{conv_macs, count_ops, OpsReport, OpsRow};
pub use equivariance::{
    pca_equivariance, random_baseline, spectrum, sweep_observations, transform_sweep, CapsuleView,
    EquivarianceResult, Spectrum, TransformFamily,
};
pub use introspect::{default_deltas, misclassification_report, perturb_reconstruct, Misclassified, Perturbation};
