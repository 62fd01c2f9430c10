//! Video super-resolution by a reference-conditioned video diffusion model,
//! with a bidirectional sampler that reuses forward-pass temporal attention
//! when denoising the time-reversed clip.

pub mod checkpoint;
pub mod config;
pub mod enhancer;
pub mod error;
pub mod flow;
pub mod longvideo;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tiling;
pub mod training;
pub mod video;

pub use error::{Error, Result};
