//! Layer kernels: classical and bipolar morphological (BM) convolution and
//! dense layers, plus the non-convertible helpers (activations, pooling,
//! batch normalization), the loss and the optimizer.
//!
//! Activations are NHWC (`[batch, L, M, C]`) for convolutions and
//! `[batch, P]` for dense layers. Convolution weights are `[K, K, C, F]`,
//! dense weights `[P, Q]`.

mod adam;
mod bm;
mod classical;
mod conv;
mod layers;
mod loss;
mod opcount;

use thiserror::Error;

use crate::tensor::TensorError;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use bm::{
    bm_backward, bm_conv_forward, bm_dense_forward, log_domain, BmCache, BmGrads, BmWeights,
};
pub use classical::{
    classical_conv_backward, classical_conv_forward, classical_dense_backward,
    classical_dense_forward, ClassicalCache, ClassicalConvWeights, ClassicalDenseWeights,
    ClassicalGrads,
};
pub use conv::{ConvGeometry, Padding};
pub use layers::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, global_avg_pool_backward,
    global_avg_pool_forward, max_pool_backward, max_pool_forward, relu_backward, relu_forward,
    BatchNormCache, BatchNormParams, MaxPoolCache,
};
pub use loss::{softmax, softmax_cross_entropy};
pub use opcount::OpCount;

/// Finite stand-in for `ln 0 = -inf` in the log domain. `exp(-1e4)` is
/// exactly zero in both `f32` and `f64`.
pub const NEG_SENTINEL: f64 = -1e4;

/// Magnitudes below this are treated as zero by the log-domain transform.
pub const LOG_FLOOR_INPUT: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

/// Which `ln`/`exp` the BM kernels use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MathMode {
    #[default]
    Exact,
    /// Single-precision polynomial approximations from [`crate::approx`].
    /// Inference only; gradients always use exact derivatives.
    Approx,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("backward called without a cached forward pass")]
    MissingCache,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;
