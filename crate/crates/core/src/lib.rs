//! Micro-expression recognition with dual 2D/3D residual branches,
//! hierarchical attention and uncertainty-weighted multi-task training.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
