//! Attention sinks versus diagonal patterns in single-head transformer blocks.
//!
//! The crate covers the oversmoothing covariance model, sink-representability
//! geometry, head-pattern census over tensor dumps, explicit sink and diagonal
//! constructions for two synthetic tasks with their cost bounds, and a small
//! trainer for measuring how learned cost scales with context length.

pub mod block;
pub mod constructions;
pub mod dump;
pub mod error;
pub mod exec;
pub mod head_patterns;
pub mod linalg;
pub mod oversmoothing;
pub mod report;
pub mod sink_geometry;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
