//! Soft convex quantization and vector-quantization bottlenecks on a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mat;
pub mod models;
pub mod oracle;
pub mod quantizers;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use mat::Mat;
pub use rng::Rng;
