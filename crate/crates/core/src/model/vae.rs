use candle_core::{Tensor, Var};

use super::ModelConfig;
use crate::error::{ensure, Result};
use crate::nn::{upsample2x, Conv2d, Padding, ParamBuilder};

/// Low-rank residual on a convolution: `down` (k x k, rank r) then a zero-initialized 1x1 `up`.
#[derive(Debug, Clone)]
pub struct LoraConv {
    down: Conv2d,
    up: Conv2d,
}

impl LoraConv {
    fn new(pb: &ParamBuilder, cin: usize, cout: usize, k: usize, rank: usize) -> Result<Self> {
        let down = Conv2d::without_bias(&pb.pp("lora_down"), cin, rank, k)?.with_padding(Padding::Replicate);
        let up = Conv2d::zeroed_without_bias(&pb.pp("lora_up"), rank, cout, 1)?;
        Ok(Self { down, up })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.up.forward(&self.down.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderConv {
    conv: Conv2d,
    lora: Option<LoraConv>,
    upsample: bool,
}

/// Frame-wise convolutional autoencoder with spatial factor `f`. Padding
/// replicates edges so that constant images map to constant latents and back.
#[derive(Debug, Clone)]
pub struct Vae {
    encoder: Vec<Conv2d>,
    decoder: Vec<DecoderConv>,
    latent_scale: Var,
    factor: usize,
}

impl Vae {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.vae_width;
        let levels = cfg.downscale_levels();
        let rep = |conv: Conv2d| conv.with_padding(Padding::Replicate);
        let ep = pb.pp("encoder");
        let mut encoder = vec![rep(Conv2d::new(&ep.pp("conv0"), 3, c, 3, 1)?)];
        for i in 0..levels {
            encoder.push(rep(Conv2d::new(&ep.pp(format!("down{i}")), c, c, 3, 2)?));
        }
        encoder.push(rep(Conv2d::new(&ep.pp("conv_out"), c, cfg.latent_channels, 3, 1)?));

        let dp = pb.pp("decoder");
        let mut specs = vec![("conv0".to_string(), cfg.latent_channels, c, false)];
        for i in 0..levels {
            specs.push((format!("up{i}"), c, c, true));
        }
        specs.push(("conv_out".to_string(), c, 3, false));
        let decoder = specs
            .into_iter()
            .map(|(name, cin, cout, upsample)| {
                let lp = dp.pp(&name);
                Ok(DecoderConv {
                    conv: rep(Conv2d::new(&lp, cin, cout, 3, 1)?),
                    lora: if cfg.vae_lora_rank > 0 {
                        Some(LoraConv::new(&lp, cin, cout, 3, cfg.vae_lora_rank)?)
                    } else {
                        None
                    },
                    upsample,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            decoder,
            latent_scale: pb.constant("latent_scale", &[1], 1.0)?,
            factor: cfg.latent_downscale,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_scale(&self) -> &Var {
        &self.latent_scale
    }

    pub fn has_adapter(&self) -> bool {
        self.decoder.iter().any(|d| d.lora.is_some())
    }

    /// `(N, 3, H, W)` → `(N, C, H/f, W/f)`, scaled by the stored latent scale.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        ensure!(
            h % self.factor == 0 && w % self.factor == 0,
            Contract,
            "frame {h}x{w} is not divisible by the latent factor {}",
            self.factor
        );
        let last = self.encoder.len() - 1;
        let mut z = x.clone();
        for (i, conv) in self.encoder.iter().enumerate() {
            z = conv.forward(&z)?;
            if i < last {
                z = z.silu()?;
            }
        }
        Ok(z.broadcast_mul(self.latent_scale.as_tensor())?)
    }

    pub fn decode(&self, z: &Tensor, adapter_on: bool) -> Result<Tensor> {
        let last = self.decoder.len() - 1;
        let mut h = z.broadcast_div(self.latent_scale.as_tensor())?;
        for (i, layer) in self.decoder.iter().enumerate() {
            if layer.upsample {
                h = upsample2x(&h)?;
            }
            let mut out = layer.conv.forward(&h)?;
            if adapter_on {
                if let Some(lora) = &layer.lora {
                    out = (out + lora.forward(&h)?)?;
                }
            }
            h = if i < last { out.silu()? } else { out };
        }
        Ok(h)
    }
}
