//! Attribute-guided unpaired image translation.
//!
//! The crate trains a multi-head composition-attribute network (scalar
//! attributes like contrast plus categorical ones like color harmony),
//! couples it to a CycleGAN as a frozen critic, and validates the whole
//! pipeline against procedural synthetic scenes whose attribute values are
//! known by construction.
//!
//! Numeric code is generic over the scalar type (`f32`/`f64`); see the
//! aliases at the crate root for the concrete instantiations used by the
//! CLI and the test harness.

pub mod acan;
pub mod autodiff;
pub mod error;
pub mod gan;
pub mod guidance;
pub mod image;
pub mod linalg;
pub mod log;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod schema;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor (the CLI default).
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by the gradient-check harness.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision image batch.
pub type ImageBatch32 = image::ImageBatch<f32>;
/// Training-precision attribute network.
pub type AcanModel32 = acan::AcanModel<f32>;
