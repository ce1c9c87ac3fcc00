//! Differentiable tensor kernels. Every forward function has a matching
//! `*_backward` returning vector-Jacobian products.

pub mod activation;
pub mod conv;
pub mod matmul;
pub mod norm;

pub use activation::{
    add, elementwise, elementwise_backward, relu, relu_backward, softmax, softmax_backward,
    Elementwise,
};
pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvGrads,
};
pub use matmul::{dense, dense_backward, matmul_batched, matmul_batched_backward, DenseGrads};
pub use norm::{normalize, normalize_backward, NormCache, NormGrads, NormMode, NormOutput, RunningStats};
