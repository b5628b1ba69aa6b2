//! Part-based zero-shot recognition pipeline.

pub mod attention;
pub mod backbone;
pub mod cropping;
pub mod embedding;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod inference;
pub mod kmeans;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
