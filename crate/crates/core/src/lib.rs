//! Point cloud completion with cross-resolution vector attention.
//!
//! The numeric core is generic over [`Real`] (implemented for `f32` and
//! `f64`). The aliases at the crate root fix the scalar to `f64`; the `*32`
//! aliases use `f32`.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod crt;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::ChamferVariant;
pub use model::{CrtKind, ModelConfig, Variant};
pub use scalar::Real;

pub type Point = geometry::Point<f64>;
pub type PointCloud = geometry::PointCloud<f64>;
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Gradients = tensor::Gradients<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type Model = model::Model<f64>;
pub type CompletionOutput = model::CompletionOutput<f64>;

pub type Point32 = geometry::Point<f32>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type Model32 = model::Model<f32>;
pub type CompletionOutput32 = model::CompletionOutput<f32>;
