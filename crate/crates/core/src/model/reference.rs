use candle_core::Tensor;

use super::ModelConfig;
use crate::error::Result;
use crate::nn::{adaptive_mean_pool, Conv2d, Linear, ParamBuilder};

/// Small convolutional image encoder producing `grid * grid` conditioning tokens.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    convs: Vec<Conv2d>,
    proj: Linear,
    grid: usize,
}

impl ReferenceEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.base_width;
        let convs = vec![
            Conv2d::new(&pb.pp("conv0"), 3, w, 3, 1)?,
            Conv2d::new(&pb.pp("conv1"), w, w, 3, 2)?,
            Conv2d::new(&pb.pp("conv2"), w, w, 3, 2)?,
        ];
        Ok(Self {
            convs,
            proj: Linear::new(&pb.pp("proj"), w, cfg.ref_embed_dim)?,
            grid: cfg.ref_grid,
        })
    }

    /// `(B, 3, H, W)` → `(B, grid^2, ref_embed_dim)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut h = images.clone();
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        let pooled = adaptive_mean_pool(&h, self.grid)?;
        let (b, c, g, _) = pooled.dims4()?;
        let tokens = pooled.reshape((b, c, g * g))?.transpose(1, 2)?.contiguous()?;
        self.proj.forward(&tokens)
    }
}

/// Patch discriminator used by the decoder fine-tuning stage.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.disc_width;
        Ok(Self {
            convs: vec![
                Conv2d::new(&pb.pp("conv0"), 3, w, 3, 2)?,
                Conv2d::new(&pb.pp("conv1"), w, 2 * w, 3, 2)?,
                // No bias: under the hinge loss its gradient cancels while
                // real and fake scores sit inside the margin.
                Conv2d::without_bias(&pb.pp("conv_out"), 2 * w, 1, 1)?,
            ],
        })
    }

    /// Per-patch realness scores `(N, 1, H/4, W/4)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}
