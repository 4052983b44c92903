//! Coarse-to-fine (C2F) network cascades.
//!
//! A C2F network is one convolutional feature path cut into levels, each with
//! its own classifier head. Inference walks the levels from coarsest to finest
//! and stops at the first level whose confidence clears that level's
//! threshold. This crate trains such networks stagewise (feature transformers,
//! then the coarser heads with frozen features), prices every level with an
//! analytic MAC model, and tunes the per-level thresholds with GP-UCB Bayesian
//! optimization for a chosen error/energy trade-off.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the common instantiations.

mod binio;
pub mod bo;
pub mod cascade;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use model::{ArchConfig, C2FArchitecture, LevelConfig, LevelSpec, WeightStore};
pub use nn::{LayerParams, LayerSpec};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type WeightStore64 = WeightStore<f64>;
pub type WeightStore32 = WeightStore<f32>;
