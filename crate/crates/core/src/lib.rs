//! Dual-mining few-shot segmentation.
//!
//! A query image is segmented for the class shown in K annotated support
//! images. Support and query features are mined jointly for shared regions
//! ([`cprm`]), the query's own ambiguous regions are mined against itself
//! ([`csrm`]), and activations of classes seen during training are suppressed
//! through a prototype memory ([`kms`]).
//!
//! All numeric code is generic over [`Scalar`]; training uses `f32` and the
//! gradient checks run the same code in `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod cprm;
pub mod csrm;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod kms;
pub mod kshot;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type DmNet32 = pipeline::DmNet<f32>;
pub type DmNet64 = pipeline::DmNet<f64>;
pub type Experiment32 = experiment::Experiment<f32>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type MetaMemory32 = kms::MetaMemory<f32>;
