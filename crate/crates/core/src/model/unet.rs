//! The per-frame UNet denoiser. All convolutions and normalizations act on
//! single frames; frames interact only through [`TemporalAttention`] sites.

use candle_core::{Tensor, Var};

use super::attention::{AttentionCtx, CrossAttention, Role, TemporalAttention};
use super::ModelConfig;
use crate::error::{ensure, Result};
use crate::nn::{sinusoidal, upsample2x, Conv2d, GroupNorm, Linear, ParamBuilder};

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&pb.pp("norm1"), cin)?,
            conv1: Conv2d::new(&pb.pp("conv1"), cin, cout, 3, 1)?,
            time_proj: Linear::new(&pb.pp("time_proj"), temb_dim, 2 * cout)?,
            norm2: GroupNorm::new(&pb.pp("norm2"), cout)?,
            conv2: Conv2d::new(&pb.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&pb.pp("skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `temb: (clips, E)`, broadcast over the `clip_len` frames of each clip.
    ///
    /// The time embedding scales and shifts the second normalization's
    /// output; an additive shift before it would be normalized away.
    pub fn forward(&self, x: &Tensor, temb: &Tensor, clip_len: usize) -> Result<Tensor> {
        let (n, _, _, _) = x.dims4()?;
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let cout = h.dims()[1];
        let t = self.time_proj.forward(&temb.silu()?)?; // (clips, 2 * cout)
        let clips = t.dims()[0];
        let t = t
            .unsqueeze(1)?
            .broadcast_as((clips, clip_len, 2 * cout))?
            .contiguous()?
            .reshape((n, 2 * cout, 1, 1))?;
        let (scale, shift) = (t.narrow(1, 0, cout)?, t.narrow(1, cout, cout)?);
        let h = self.norm2.forward(&h)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    res: ResBlock,
    tattn: TemporalAttention,
    xattn: CrossAttention,
    down: Option<Conv2d>,
}

/// Input convolution, time embedding, per-level blocks and the middle block.
/// Shared in structure by the denoiser and the ControlNet.
#[derive(Debug, Clone)]
pub struct UNetEncoder {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
    mid_res: ResBlock,
    mid_attn: TemporalAttention,
    temb_in: usize,
}

/// Encoder outputs: one skip per level plus the middle activation.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub temb: Tensor,
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
}

impl UNetEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig, with_backward_role: bool) -> Result<Self> {
        let widths = &cfg.resolutions;
        let temb_in = widths[0];
        let temb = cfg.temb_dim();
        let mut levels = Vec::with_capacity(widths.len());
        for (l, &w) in widths.iter().enumerate() {
            let lp = pb.pp(format!("level{l}"));
            let down = match widths.get(l + 1) {
                Some(&next) => Some(Conv2d::new(&lp.pp("down"), w, next, 3, 2)?),
                None => None,
            };
            levels.push(EncoderLevel {
                res: ResBlock::new(&lp.pp("res"), w, w, temb)?,
                tattn: TemporalAttention::new(&lp.pp("tattn"), w, cfg.num_heads, with_backward_role)?,
                xattn: CrossAttention::new(&lp.pp("xattn"), w, cfg.ref_embed_dim, cfg.num_heads)?,
                down,
            });
        }
        let deepest = *widths.last().expect("validated non-empty");
        Ok(Self {
            time1: Linear::new(&pb.pp("time1"), temb_in, temb)?,
            time2: Linear::new(&pb.pp("time2"), temb, temb)?,
            conv_in: Conv2d::new(&pb.pp("conv_in"), 2 * cfg.latent_channels, widths[0], 3, 1)?,
            levels,
            mid_res: ResBlock::new(&pb.pp("mid.res"), deepest, deepest, temb)?,
            mid_attn: TemporalAttention::new(&pb.pp("mid.tattn"), deepest, cfg.num_heads, with_backward_role)?,
            temb_in,
        })
    }

    pub fn site_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.levels.iter().map(|l| l.tattn.site().to_string()).collect();
        v.push(self.mid_attn.site().to_string());
        v
    }

    pub fn time_embedding(&self, t_values: &Tensor) -> Result<Tensor> {
        let s = sinusoidal(t_values, self.temb_in)?;
        Ok(self.time2.forward(&self.time1.forward(&s)?.silu()?)?)
    }

    /// `added` (same shape as the input-conv output) is summed right after the input convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        z_in: &Tensor,
        clip_len: usize,
        t_values: &Tensor,
        ref_tokens: &Tensor,
        added: Option<&Tensor>,
        role: Role,
        ctx: &mut AttentionCtx,
    ) -> Result<EncoderFeatures> {
        let temb = self.time_embedding(t_values)?;
        let mut h = self.conv_in.forward(z_in)?;
        if let Some(a) = added {
            h = (h + a)?;
        }
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = level.res.forward(&h, &temb, clip_len)?;
            h = level.tattn.forward(&h, clip_len, role, ctx)?;
            h = level.xattn.forward(&h, clip_len, ref_tokens)?;
            skips.push(h.clone());
            if let Some(down) = &level.down {
                h = down.forward(&h)?;
            }
        }
        let h = self.mid_res.forward(&h, &temb, clip_len)?;
        let mid = self.mid_attn.forward(&h, clip_len, role, ctx)?;
        Ok(EncoderFeatures { temb, skips, mid })
    }
}

/// Residuals added to the decoder's skip inputs and to the middle activation.
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
}

impl ControlResiduals {
    pub fn max_abs(&self) -> Result<f64> {
        let mut m = 0f64;
        for t in self.skips.iter().chain(std::iter::once(&self.mid)) {
            let v = t
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
            m = m.max(v);
        }
        Ok(m)
    }

    pub fn zeros_like(feats: &EncoderFeatures) -> Result<Self> {
        Ok(Self {
            skips: feats.skips.iter().map(|s| s.zeros_like()).collect::<candle_core::Result<_>>()?,
            mid: feats.mid.zeros_like()?,
        })
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    res: ResBlock,
    tattn: TemporalAttention,
    up: Option<Conv2d>,
}

/// Video denoiser predicting `v` for each frame of each clip.
///
/// Holds two value/output projection sets at every temporal site: one used in
/// the forward role and one in the backward role. All other weights are shared.
#[derive(Debug, Clone)]
pub struct VideoDenoiser {
    pub(crate) encoder: UNetEncoder,
    decoder: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    prefix: String,
}

impl VideoDenoiser {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let widths = &cfg.resolutions;
        let temb = cfg.temb_dim();
        let encoder = UNetEncoder::new(&pb.pp("encoder"), cfg, true)?;
        // Deepest level first.
        let mut decoder = Vec::with_capacity(widths.len());
        for l in (0..widths.len()).rev() {
            let w = widths[l];
            let lp = pb.pp(format!("decoder.level{l}"));
            decoder.push(DecoderLevel {
                res: ResBlock::new(&lp.pp("res"), 2 * w, w, temb)?,
                tattn: TemporalAttention::new(&lp.pp("tattn"), w, cfg.num_heads, true)?,
                up: if l > 0 {
                    Some(Conv2d::new(&lp.pp("up"), w, widths[l - 1], 3, 1)?)
                } else {
                    None
                },
            });
        }
        Ok(Self {
            encoder,
            decoder,
            out_norm: GroupNorm::new(&pb.pp("out_norm"), widths[0])?,
            out_conv: Conv2d::new(&pb.pp("out_conv"), widths[0], cfg.latent_channels, 3, 1)?,
            prefix: pb.prefix().to_string(),
        })
    }

    pub fn site_names(&self) -> Vec<String> {
        let mut v = self.encoder.site_names();
        v.extend(self.decoder.iter().map(|d| d.tattn.site().to_string()));
        v
    }

    /// `z_in: (clips * clip_len, 2 * latent_channels, h, w)`: noisy latent
    /// concatenated channel-wise with the repeated reference latent.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        z_in: &Tensor,
        clip_len: usize,
        t_values: &Tensor,
        ref_tokens: &Tensor,
        control: Option<&ControlResiduals>,
        role: Role,
        ctx: &mut AttentionCtx,
    ) -> Result<Tensor> {
        let feats = self
            .encoder
            .forward(z_in, clip_len, t_values, ref_tokens, None, role, ctx)?;
        if let Some(c) = control {
            ensure!(
                c.skips.len() == feats.skips.len()
                    && c.skips.iter().zip(&feats.skips).all(|(a, b)| a.dims() == b.dims())
                    && c.mid.dims() == feats.mid.dims(),
                Contract,
                "control residual shapes do not match the decoder skips"
            );
        }
        let mut h = match control {
            Some(c) => (&feats.mid + &c.mid)?,
            None => feats.mid.clone(),
        };
        let levels = feats.skips.len();
        for (i, dec) in self.decoder.iter().enumerate() {
            let l = levels - 1 - i;
            let skip = match control {
                Some(c) => (&feats.skips[l] + &c.skips[l])?,
                None => feats.skips[l].clone(),
            };
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = dec.res.forward(&h, &feats.temb, clip_len)?;
            h = dec.tattn.forward(&h, clip_len, role, ctx)?;
            if let Some(up) = &dec.up {
                h = up.forward(&upsample2x(&h)?)?;
            }
        }
        Ok(self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?)
    }

    /// The effective parameter set of a role, under role-independent names
    /// (`back_to_v`/`back_to_out` are reported as `to_v`/`to_out` for the backward role).
    pub fn role_parameters(&self, store: &crate::nn::ParamStore, role: Role) -> Vec<(String, Var)> {
        let prefix = format!("{}.", self.prefix);
        store
            .with_prefix(&prefix)
            .into_iter()
            .filter_map(|(name, var)| {
                let is_back = is_backward_projection(&name);
                match (role, is_back) {
                    (Role::Forward, false) => Some((name, var)),
                    (Role::Forward, true) => None,
                    (Role::Backward, true) => Some((name.replace(".back_to_", ".to_"), var)),
                    (Role::Backward, false) => {
                        if is_temporal_value_or_output(&name) {
                            None
                        } else {
                            Some((name, var))
                        }
                    }
                }
            })
            .collect()
    }
}

pub fn is_backward_projection(name: &str) -> bool {
    name.contains(".tattn.back_to_v.") || name.contains(".tattn.back_to_out.")
}

/// Forward-role temporal `W_v` / `W_o` parameters.
pub fn is_temporal_value_or_output(name: &str) -> bool {
    name.contains(".tattn.to_v.") || name.contains(".tattn.to_out.")
}
