//! Toy data, degradation, losses, and the staged training recipe.

pub mod data;
pub mod degrade;
pub mod losses;
pub mod stages;

pub use data::{synthesize_toy_videos, MotionSpec, ToyVideo};
pub use degrade::{degrade, DegradationConfig};
pub use losses::{gan_losses, PerceptualNet};
pub use stages::{
    train_base, train_sr, train_stage1, train_stage2, train_stage3, train_vae, ClipBatch, NoiseDraw,
    backward_role_loss, sampled_latents, v_prediction_loss, ReferenceSource, StageConfig, StageReport, TrainingSet,
};
