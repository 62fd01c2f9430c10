//! Network definitions and the bundle that owns their parameters.

pub mod attention;
pub mod controlnet;
pub mod reference;
pub mod unet;
pub mod vae;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use attention::{AttentionCtx, AttentionMode, Role, SiteAttention, TemporalAttentionRecord};
pub use controlnet::VideoControlNet;
pub use reference::{PatchDiscriminator, ReferenceEncoder};
pub use unet::{ControlResiduals, VideoDenoiser};
pub use vae::Vae;

use crate::checkpoint::{Container, NamedArray};
use crate::error::{ensure, Error, Result};
use crate::nn::ParamStore;
use crate::rng::SeedTree;

fn d_frames() -> usize {
    14
}
fn d_latent_channels() -> usize {
    4
}
fn d_base_width() -> usize {
    32
}
fn d_num_heads() -> usize {
    2
}
fn d_latent_downscale() -> usize {
    4
}
fn d_ref_embed_dim() -> usize {
    32
}
fn d_ref_grid() -> usize {
    2
}
fn d_resolutions() -> Vec<usize> {
    vec![32, 48]
}
fn d_vae_width() -> usize {
    32
}
fn d_vae_lora_rank() -> usize {
    4
}
fn d_disc_width() -> usize {
    16
}

/// Architecture hyper-parameters. Every field has a default so partial TOML works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip.
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_latent_channels")]
    pub latent_channels: usize,
    /// Width of the small stems (reference encoder, control video embedding).
    #[serde(default = "d_base_width")]
    pub base_width: usize,
    #[serde(default = "d_num_heads")]
    pub num_heads: usize,
    /// Pixel-to-latent downscale; a power of two.
    #[serde(default = "d_latent_downscale")]
    pub latent_downscale: usize,
    #[serde(default = "d_ref_embed_dim")]
    pub ref_embed_dim: usize,
    /// Reference tokens form a `ref_grid x ref_grid` grid.
    #[serde(default = "d_ref_grid")]
    pub ref_grid: usize,
    /// Channel width of each denoiser level; every level halves the latent grid.
    #[serde(default = "d_resolutions")]
    pub resolutions: Vec<usize>,
    #[serde(default = "d_vae_width")]
    pub vae_width: usize,
    /// Rank of the decoder adapter; 0 builds no adapter.
    #[serde(default = "d_vae_lora_rank")]
    pub vae_lora_rank: usize,
    #[serde(default = "d_disc_width")]
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

impl ModelConfig {
    pub fn temb_dim(&self) -> usize {
        2 * self.resolutions[0]
    }

    pub fn downscale_levels(&self) -> usize {
        self.latent_downscale.trailing_zeros() as usize
    }

    /// Latent grid of a `height x width` frame must divide by this.
    pub fn latent_multiple(&self) -> usize {
        1 << (self.resolutions.len() - 1)
    }

    /// Pixel dimensions must divide by this.
    pub fn pixel_multiple(&self) -> usize {
        self.latent_downscale * self.latent_multiple()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.frames >= 2, Config, "frames must be at least 2, got {}", self.frames);
        ensure!(
            self.latent_downscale >= 2 && self.latent_downscale.is_power_of_two(),
            Config,
            "latent_downscale must be a power of two >= 2, got {}",
            self.latent_downscale
        );
        ensure!(!self.resolutions.is_empty(), Config, "resolutions must not be empty");
        ensure!(self.num_heads >= 1, Config, "num_heads must be positive");
        for &r in &self.resolutions {
            ensure!(
                r > 0 && r % self.num_heads == 0,
                Config,
                "every resolution width must be a positive multiple of num_heads ({}), got {r}",
                self.num_heads
            );
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("base_width", self.base_width),
            ("ref_embed_dim", self.ref_embed_dim),
            ("ref_grid", self.ref_grid),
            ("vae_width", self.vae_width),
            ("disc_width", self.disc_width),
        ] {
            ensure!(v > 0, Config, "{name} must be positive");
        }
        Ok(())
    }
}

/// Named subsets of the parameter store that training stages update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// VAE encoder/decoder without the adapter and latent scale.
    VaeCore,
    /// Image-to-video denoiser (forward role) and reference encoder.
    Base,
    ControlNet,
    /// Backward-role temporal value/output projections of the denoiser.
    BackwardAttention,
    VaeAdapter,
    Discriminator,
}

impl ParamGroup {
    pub fn matches(self, name: &str) -> bool {
        match self {
            Self::VaeCore => {
                name.starts_with("vae.") && !name.contains(".lora_") && name != "vae.latent_scale"
            }
            Self::Base => {
                (name.starts_with("denoiser.") && !unet::is_backward_projection(name))
                    || name.starts_with("reference.")
            }
            Self::ControlNet => name.starts_with("control."),
            Self::BackwardAttention => {
                name.starts_with("denoiser.") && unet::is_backward_projection(name)
            }
            Self::VaeAdapter => name.starts_with("vae.") && name.contains(".lora_"),
            Self::Discriminator => name.starts_with("disc."),
        }
    }
}

/// Conditioning derived from one reference frame per clip.
#[derive(Debug, Clone)]
pub struct ReferenceCondition {
    /// `(clips, tokens, ref_embed_dim)`
    pub tokens: Tensor,
    /// `(clips, latent_channels, h, w)`
    pub latent: Tensor,
}

impl ReferenceCondition {
    pub fn clips(&self) -> usize {
        self.tokens.dims()[0]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: ModelConfig,
    seed: u64,
    stages: Vec<String>,
}

const MANIFEST_KIND: &str = "bivsr-model";

/// All networks of the pipeline over a single parameter store.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub denoiser: VideoDenoiser,
    pub controlnet: VideoControlNet,
    pub vae: Vae,
    pub reference: ReferenceEncoder,
    pub discriminator: PatchDiscriminator,
    seed: u64,
    stages: Vec<String>,
}

impl ModelBundle {
    /// Fresh weights. The control branch starts as a copy of the denoiser
    /// encoder and backward-role projections start equal to the forward ones.
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype);
        let pb = store.builder(SeedTree::new(seed).child("init"));
        let bundle = Self {
            denoiser: VideoDenoiser::new(&pb.pp("denoiser"), &config)?,
            controlnet: VideoControlNet::new(&pb.pp("control"), &config)?,
            vae: Vae::new(&pb.pp("vae"), &config)?,
            reference: ReferenceEncoder::new(&pb.pp("reference"), &config)?,
            discriminator: PatchDiscriminator::new(&pb.pp("disc"), &config)?,
            config,
            store,
            seed,
            stages: Vec::new(),
        };
        bundle.sync_backward_attention()?;
        bundle.reclone_controlnet()?;
        Ok(bundle)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Training stages applied so far, oldest first.
    pub fn stages(&self) -> &[String] {
        &self.stages
    }

    pub fn record_stage(&mut self, stage: &str) {
        self.stages.push(stage.to_string());
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    pub fn vars(&self, group: ParamGroup) -> Vec<Var> {
        self.store
            .select(|n| group.matches(n))
            .into_iter()
            .map(|(_, v)| v)
            .collect()
    }

    /// Copy the denoiser encoder into the control branch encoder.
    pub fn reclone_controlnet(&self) -> Result<usize> {
        self.store.copy_prefix("denoiser.encoder.", "control.encoder.")
    }

    /// Reset backward-role projections to the forward-role values.
    pub fn sync_backward_attention(&self) -> Result<()> {
        for (name, var) in self.store.select(unet::is_backward_projection) {
            let src = name.replace(".back_to_", ".to_");
            let value = self
                .store
                .get(&src)
                .ok_or_else(|| Error::Structural(format!("no forward projection `{src}`")))?;
            var.set(&value.as_detached_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Every temporal attention site touched by one denoising step, control branch first.
    pub fn site_manifest(&self) -> Vec<String> {
        let mut v = self.controlnet.site_names();
        v.extend(self.denoiser.site_names());
        v
    }

    /// Encode `(B, 3, H, W)` reference frames into cross-attention tokens and a latent.
    pub fn reference_condition(&self, frames: &Tensor) -> Result<ReferenceCondition> {
        Ok(ReferenceCondition {
            tokens: self.reference.forward(frames)?,
            latent: self.vae.encode(frames)?,
        })
    }

    /// Channel-concatenate each clip's reference latent to its noisy frames.
    pub fn denoiser_input(&self, z: &Tensor, reference: &ReferenceCondition) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        let clips = reference.clips();
        ensure!(
            clips > 0 && n % clips == 0,
            Contract,
            "{n} latent frames cannot be split into {clips} clips"
        );
        let k = n / clips;
        let r = reference
            .latent
            .unsqueeze(1)?
            .broadcast_as((clips, k, c, h, w))?
            .reshape((n, c, h, w))?;
        Ok(Tensor::cat(&[z, &r], 1)?)
    }

    /// One velocity prediction, optionally with the control branch.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_v(
        &self,
        z: &Tensor,
        clip_len: usize,
        t_values: &Tensor,
        reference: &ReferenceCondition,
        control_video: Option<&Tensor>,
        role: Role,
        ctx: &mut AttentionCtx,
    ) -> Result<Tensor> {
        let z_in = self.denoiser_input(z, reference)?;
        let control = match control_video {
            Some(video) => Some(self.controlnet.forward(
                &z_in,
                clip_len,
                t_values,
                &reference.tokens,
                video,
                ctx,
            )?),
            None => None,
        };
        self.denoiser.forward(
            &z_in,
            clip_len,
            t_values,
            &reference.tokens,
            control.as_ref(),
            role,
            ctx,
        )
    }

    fn manifest_json(&self) -> Result<String> {
        serde_json::to_string(&Manifest {
            kind: MANIFEST_KIND.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            stages: self.stages.clone(),
        })
        .map_err(|e| Error::Format {
            what: "checkpoint manifest",
            detail: e.to_string(),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut arrays = BTreeMap::new();
        for (name, t) in self.store.snapshot() {
            arrays.insert(name, NamedArray::from_tensor(&t)?);
        }
        Ok(Container {
            manifest: self.manifest_json()?,
            arrays,
        })
    }

    pub fn from_container(container: &Container) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&container.manifest).map_err(|e| Error::Format {
                what: "checkpoint manifest",
                detail: e.to_string(),
            })?;
        ensure!(
            manifest.kind == MANIFEST_KIND,
            Structural,
            "checkpoint holds a `{}`, not a model bundle",
            manifest.kind
        );
        let dtype = match container.arrays.values().next().map(|a| &a.data) {
            Some(crate::checkpoint::ArrayData::F64(_)) => DType::F64,
            _ => DType::F32,
        };
        let mut bundle = Self::new(manifest.config, dtype, manifest.seed)?;
        let device = bundle.store.device().clone();
        let values = container
            .arrays
            .iter()
            .map(|(k, a)| Ok((k.clone(), a.to_tensor(&device)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        bundle.store.load(&values)?;
        bundle.stages = manifest.stages;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Independent copy with its own parameter store; `clone` shares parameters.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_container(&self.to_container()?)
    }
}
