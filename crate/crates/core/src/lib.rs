//! Single-stage JPEG artifact reduction and super-resolution.
//!
//! The crate contains the network ([`model`]) and its autograd machinery,
//! paired-data synthesis ([`degradation`]), training ([`training`]),
//! Y-channel quality metrics and self-ensembling ([`metrics`]), the
//! checkpoint format ([`checkpoint`]), and the command-line harness ([`cli`]).

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod degradation;
pub mod error;
pub mod fixtures;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{ContextVariant, ModelConfig, UpsampleVariant};
pub use params::{ConvLayer, ParameterStore};
pub use tensor::{Real, Tensor};
