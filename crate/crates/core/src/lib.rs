//! Multiplication-free bipolar morphological (BM) networks.
//!
//! The crate provides
//!
//! - [`tensor`]: a small row-major tensor type,
//! - [`nn`]: classical and BM layer kernels with operation counting,
//! - [`conversion`]: sign-split weight conversion and incremental
//!   layer-by-layer conversion training,
//! - [`approx`]: fast single-precision `log2`/`exp2`,
//! - [`cost`]: closed-form operation counts and the gate/latency model,
//! - [`data`]: MNIST/CIFAR-10 readers and augmentation,
//! - [`netspec`] and [`network`]: declarative architectures and their runtime,
//! - [`checkpoint`]: the `bmnet-v1` weight file.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the element type for the common cases.

pub mod approx;
pub mod checkpoint;
pub mod conversion;
pub mod cost;
pub mod data;
pub mod metrics;
pub mod netspec;
pub mod network;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type NetworkF64 = network::Network<f64>;
pub type NetworkF32 = network::Network<f32>;
