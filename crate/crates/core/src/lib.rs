//! Swapped-prediction clustering of paired modality views.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod sinkhorn;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
