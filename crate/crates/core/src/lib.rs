//! Multi-scale decomposition forecaster with a reverse-mode autodiff core.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below pin `f64`.

pub mod ams;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ddi;
pub mod error;
pub mod loss;
pub mod mdm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod revin;
pub mod scalar;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{AmdError, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph<'a> = tensor::Graph<'a, f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type AmdModel = model::AmdModel<f64>;
pub type Adam = optim::Adam<f64>;
