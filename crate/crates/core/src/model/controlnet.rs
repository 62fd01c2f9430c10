use candle_core::Tensor;

use super::attention::{AttentionCtx, Role};
use super::unet::{ControlResiduals, UNetEncoder};
use super::ModelConfig;
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// Per-frame convolutional encoder of the (upsampled) low-quality clip,
/// reducing pixel resolution to latent resolution.
#[derive(Debug, Clone)]
pub struct VideoEmbedding {
    layers: Vec<Conv2d>,
}

impl VideoEmbedding {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let hidden = cfg.base_width;
        let mut layers = vec![Conv2d::new(&pb.pp("conv0"), 3, hidden, 3, 1)?];
        for i in 0..cfg.downscale_levels() {
            layers.push(Conv2d::new(&pb.pp(format!("down{i}")), hidden, hidden, 3, 2)?);
        }
        layers.push(Conv2d::new(&pb.pp("conv_out"), hidden, cfg.resolutions[0], 3, 1)?);
        Ok(Self { layers })
    }

    pub fn forward(&self, video: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = video.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

/// Trainable clone of the denoiser encoder driven by the low-quality clip.
/// Its outputs pass through zero-initialized 1x1 projections, so a fresh
/// ControlNet contributes exactly nothing.
#[derive(Debug, Clone)]
pub struct VideoControlNet {
    pub(crate) encoder: UNetEncoder,
    embedding: VideoEmbedding,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
}

impl VideoControlNet {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let zero_skips = cfg
            .resolutions
            .iter()
            .enumerate()
            .map(|(l, &w)| Conv2d::zeroed(&pb.pp(format!("zero_skip{l}")), w, w, 1))
            .collect::<Result<Vec<_>>>()?;
        let deepest = *cfg.resolutions.last().expect("validated");
        Ok(Self {
            encoder: UNetEncoder::new(&pb.pp("encoder"), cfg, false)?,
            embedding: VideoEmbedding::new(&pb.pp("embedding"), cfg)?,
            zero_skips,
            zero_mid: Conv2d::zeroed(&pb.pp("zero_mid"), deepest, deepest, 1)?,
        })
    }

    pub fn site_names(&self) -> Vec<String> {
        self.encoder.site_names()
    }

    pub fn projection_vars(&self) -> Vec<candle_core::Var> {
        self.zero_skips
            .iter()
            .chain(std::iter::once(&self.zero_mid))
            .flat_map(Conv2d::vars)
            .collect()
    }

    /// `control_video: (clips * clip_len, 3, H, W)` at the target pixel resolution.
    pub fn forward(
        &self,
        z_in: &Tensor,
        clip_len: usize,
        t_values: &Tensor,
        ref_tokens: &Tensor,
        control_video: &Tensor,
        ctx: &mut AttentionCtx,
    ) -> Result<ControlResiduals> {
        ensure!(
            control_video.dims()[0] == z_in.dims()[0],
            Contract,
            "control clip has {} frames, latent has {}",
            control_video.dims()[0],
            z_in.dims()[0]
        );
        let embed = self.embedding.forward(control_video)?;
        let want = [z_in.dims()[0], embed.dims()[1], z_in.dims()[2], z_in.dims()[3]];
        ensure!(
            embed.dims() == want,
            Contract,
            "control clip embeds to {:?}, latent grid needs {want:?}",
            embed.dims()
        );
        // Weights are shared between roles; only the injected maps differ.
        let feats = self.encoder.forward(
            z_in,
            clip_len,
            t_values,
            ref_tokens,
            Some(&embed),
            Role::Forward,
            ctx,
        )?;
        let skips = feats
            .skips
            .iter()
            .zip(&self.zero_skips)
            .map(|(s, p)| p.forward(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlResiduals {
            skips,
            mid: self.zero_mid.forward(&feats.mid)?,
        })
    }
}
