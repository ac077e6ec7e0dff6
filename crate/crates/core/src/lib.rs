pub mod config;
pub mod diffusion;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod inter;
pub mod intra;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod ppm;
pub mod records;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{no_grad, Rng, Scalar, Tensor};
