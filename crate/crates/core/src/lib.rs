//! Neural program sampling: typed program graphs, graph snapshots over
//! execution traces, a graph attention network trained to predict upcoming
//! memory addresses, and clustering of the resulting interval embeddings
//! into simulation points.

use std::fmt::{Debug, Display};

pub mod asm;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod graph;
pub mod nn;
pub mod pca;
pub mod pipeline;
pub mod sampler;
pub mod snapshot;
pub mod tracer;

/// Floating-point element type of the numeric code.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
}

impl<T> Scalar for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + ndarray::ScalarOperand
        + ndarray::LinalgScalar
        + std::ops::AddAssign
        + std::ops::SubAssign
        + std::ops::MulAssign
        + std::ops::DivAssign
        + Send
        + Sync
        + Debug
        + Display
        + Default
        + 'static
{
}

/// Model with single-precision parameters, the storage and inference type.
pub type Model32 = nn::Model<f32>;
/// Model with double-precision parameters, used for gradient checks.
pub type Model64 = nn::Model<f64>;
pub type Mat32 = autodiff::Mat<f32>;
pub type Mat64 = autodiff::Mat<f64>;
