//! Unpaired translation of nighttime thermal infrared frames into daytime
//! color images with top-down guided attention, attention-consistency and
//! structured-gradient-alignment losses.
//!
//! Every numeric routine is generic over [`scalar::Scalar`] (`f32` or
//! `f64`); the aliases below fix the precision used by training.

// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod edges;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod scalar;
pub mod synthetic;
pub mod tdga;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type Image32 = data::Image<f32>;
