//! Simulation of synchronous pipeline-parallel training with malicious
//! interior stages, and the duplicated-block / jumping-connection defense
//! that detects, localizes and routes around them.
//!
//! Everything numeric is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases below fix the common `f64` instantiation.

pub mod adversary;
pub mod defense;
pub mod error;
pub mod harness;
pub mod model;
pub mod protocol;
pub mod random;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Stage64 = model::StageModule<f64>;
pub type Stage32 = model::StageModule<f32>;
pub type Pipeline64 = protocol::PipelineState<f64>;
pub type Pipeline32 = protocol::PipelineState<f32>;
