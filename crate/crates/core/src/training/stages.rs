//! Training stages. Each stage updates one named parameter group and leaves
//! every other parameter bit-identical.
//!
//! Besides the three fine-tuning stages there are pretraining stages for the
//! pieces that the fine-tuning stages treat as frozen: the VAE, the
//! image-to-video denoiser with its reference encoder, and the small
//! reference super-resolution network.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::ToyVideo;
use super::degrade::{degrade, DegradationConfig};
use super::losses::{disc_accuracy, hinge_d_loss, hinge_g_loss, mse, PerceptualNet};
use crate::enhancer::TinySrNet;
use crate::error::{ensure, Error, Result};
use crate::model::{AttentionCtx, ModelBundle, ParamGroup, ReferenceCondition, Role};
use crate::rng::SeedTree;
use crate::sampling::{rotate_attention, sample_latent_traced, SamplerOptions};
use crate::schedule::{add_noise, gaussian_like, v_target, NoiseSchedule};
use crate::video::{reverse_frames_tensor, Frame, VideoClip};

/// Which frame conditions the denoiser during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// The ground-truth boundary frame.
    GroundTruth,
    /// The degraded boundary frame, bicubically upscaled.
    UpscaledInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Clips per optimizer step.
    pub batch_size: usize,
    /// Weight of the perceptual term in decoder fine-tuning.
    pub percept_weight: f64,
    /// Weight of the adversarial term in decoder fine-tuning.
    pub gan_weight: f64,
    /// The discriminator learns this many times faster than the adapter.
    pub disc_lr_multiplier: f64,
    /// Sampling steps used to produce latents for decoder fine-tuning.
    pub sample_steps: usize,
    pub sample_strength: f64,
    pub sample_bidirectional: bool,
    pub reference: ReferenceSource,
    /// Length of the discrete training noise schedule.
    pub train_timesteps: usize,
    pub seed: u64,
    /// Log the loss every this many iterations (0 disables).
    pub log_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 8e-5,
            weight_decay: 0.0,
            batch_size: 2,
            percept_weight: 1.0,
            gan_weight: 0.025,
            disc_lr_multiplier: 2.0,
            sample_steps: 8,
            sample_strength: 0.6,
            sample_bidirectional: true,
            reference: ReferenceSource::GroundTruth,
            train_timesteps: 1000,
            seed: 0,
            log_every: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive"
        );
        ensure!(self.train_timesteps >= 1, Config, "train_timesteps must be positive");
        ensure!(self.sample_steps >= 1, Config, "sample_steps must be positive");
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("percept_weight", self.percept_weight),
            ("gan_weight", self.gan_weight),
            ("disc_lr_multiplier", self.disc_lr_multiplier),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), Config, "{name} must be finite and non-negative, got {v}");
        }
        ensure!(
            self.sample_strength > 0.0 && self.sample_strength <= 1.0,
            Config,
            "sample_strength must lie in (0, 1], got {}",
            self.sample_strength
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

impl StageReport {
    /// Mean loss over the first and the last `fraction` of iterations.
    pub fn window_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.losses.len();
        let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(n)]), mean(&self.losses[n - w.min(n)..]))
    }
}

/// Ground-truth videos and the degradation that produces their inputs.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub videos: Vec<ToyVideo>,
    pub degradation: DegradationConfig,
}

/// `clips` aligned HQ/LQ clips of `k` frames, stacked clip-major.
#[derive(Debug, Clone)]
pub struct ClipBatch {
    pub clips: usize,
    pub k: usize,
    pub hq_clips: Vec<VideoClip>,
    pub lq_clips: Vec<VideoClip>,
    /// `(clips * k, 3, H, W)`
    pub hq: Tensor,
    /// LQ frames upscaled to the HQ grid, `(clips * k, 3, H, W)`.
    pub control: Tensor,
}

fn stack_frames(frames: &[&Frame], dtype: DType) -> Result<Tensor> {
    let ts = frames
        .iter()
        .map(|f| f.to_tensor(dtype, &Device::Cpu))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

impl ClipBatch {
    pub fn new(hq_clips: Vec<VideoClip>, lq_clips: Vec<VideoClip>, dtype: DType) -> Result<Self> {
        ensure!(
            !hq_clips.is_empty() && hq_clips.len() == lq_clips.len(),
            Contract,
            "{} HQ clips and {} LQ clips",
            hq_clips.len(),
            lq_clips.len()
        );
        let k = hq_clips[0].len();
        let (h, w) = hq_clips[0].dims();
        ensure!(
            hq_clips.iter().chain(&lq_clips).all(|c| c.len() == k) && hq_clips.iter().all(|c| c.dims() == (h, w)),
            Contract,
            "batch clips differ in length or size"
        );
        let hq = Tensor::cat(
            &hq_clips
                .iter()
                .map(|c| c.to_tensor(dtype, &Device::Cpu))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let control = Tensor::cat(
            &lq_clips
                .iter()
                .map(|c| c.resize_bicubic(h, w).to_tensor(dtype, &Device::Cpu))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        Ok(Self {
            clips: hq_clips.len(),
            k,
            hq_clips,
            lq_clips,
            hq,
            control,
        })
    }

    /// Boundary frame of every clip, `(clips, 3, H, W)`.
    pub fn reference(&self, source: ReferenceSource, last: bool) -> Result<Tensor> {
        let pick = |c: &VideoClip| if last { c.last().clone() } else { c.first().clone() };
        let frames: Vec<Frame> = match source {
            ReferenceSource::GroundTruth => self.hq_clips.iter().map(pick).collect(),
            ReferenceSource::UpscaledInput => {
                let (h, w) = self.hq_clips[0].dims();
                self.lq_clips.iter().map(|c| pick(c).resize_bicubic(h, w)).collect()
            }
        };
        stack_frames(&frames.iter().collect::<Vec<_>>(), self.hq.dtype())
    }
}

impl TrainingSet {
    pub fn new(videos: Vec<ToyVideo>, degradation: DegradationConfig) -> Result<Self> {
        ensure!(!videos.is_empty(), Contract, "training set is empty");
        degradation.validate()?;
        Ok(Self { videos, degradation })
    }

    /// Random clips of `k` frames, each degraded with its own draw.
    pub fn batch(&self, rng: &mut ChaCha8Rng, clips: usize, k: usize, dtype: DType) -> Result<ClipBatch> {
        let mut hq = Vec::with_capacity(clips);
        let mut lq = Vec::with_capacity(clips);
        for _ in 0..clips {
            let v = &self.videos[rng.random_range(0..self.videos.len())];
            ensure!(v.hq.len() >= k, Contract, "video has {} frames, clips need {k}", v.hq.len());
            let start = rng.random_range(0..=v.hq.len() - k);
            let clip = v.hq.slice(start, k)?;
            lq.push(degrade(&clip, &self.degradation, rng)?);
            hq.push(clip);
        }
        ClipBatch::new(hq, lq, dtype)
    }
}

/// Per-clip timesteps and the Gaussian noise of one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(rng: &mut ChaCha8Rng, latent: &Tensor, clips: usize, timesteps: usize) -> Result<Self> {
        let t = (0..clips).map(|_| rng.random_range(1..=timesteps)).collect();
        Ok(Self {
            t,
            eps: gaussian_like(latent, rng)?,
        })
    }

    /// Noised latents, velocity targets, and time-embedding values `(clips,)`.
    pub fn apply(&self, z0: &Tensor, sched: &NoiseSchedule) -> Result<(Tensor, Tensor, Tensor)> {
        let clips = self.t.len();
        let k = z0.dims()[0] / clips;
        let mut zs = Vec::with_capacity(clips);
        let mut vs = Vec::with_capacity(clips);
        for (i, &t) in self.t.iter().enumerate() {
            let z = z0.narrow(0, i * k, k)?;
            let e = self.eps.narrow(0, i * k, k)?;
            zs.push(add_noise(&z, &e, t, sched)?);
            vs.push(v_target(&z, &e, t, sched)?);
        }
        let tv: Vec<f64> = self.t.iter().map(|&t| sched.embed_value(t)).collect();
        let tv = Tensor::from_vec(tv, clips, z0.device())?.to_dtype(z0.dtype())?;
        Ok((Tensor::cat(&zs, 0)?, Tensor::cat(&vs, 0)?, tv))
    }
}

/// Velocity-prediction loss of the forward-role denoiser, with or without the control branch.
pub fn v_prediction_loss(
    bundle: &ModelBundle,
    batch: &ClipBatch,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
    reference: ReferenceSource,
    with_control: bool,
) -> Result<Tensor> {
    let z0 = bundle.vae.encode(&batch.hq)?.detach();
    let (z_t, v, tv) = draw.apply(&z0, sched)?;
    let cond = bundle.reference_condition(&batch.reference(reference, false)?)?;
    let control = with_control.then_some(&batch.control);
    let pred = bundle.predict_v(&z_t, batch.k, &tv, &cond, control, Role::Forward, &mut AttentionCtx::compute())?;
    mse(&pred, &v)
}

/// Backward-role loss on the reversed clip with rotated forward attention
/// injected; the target is the frame-reversed velocity.
pub fn backward_role_loss(
    bundle: &ModelBundle,
    batch: &ClipBatch,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
    reference: ReferenceSource,
) -> Result<Tensor> {
    let k = batch.k;
    let z0 = bundle.vae.encode(&batch.hq)?.detach();
    let (z_t, v, tv) = draw.apply(&z0, sched)?;
    let start = bundle.reference_condition(&batch.reference(reference, false)?)?;
    let end = detach_condition(bundle.reference_condition(&batch.reference(reference, true)?)?);
    let mut capture = AttentionCtx::capture();
    bundle.predict_v(&z_t, k, &tv, &start, Some(&batch.control), Role::Forward, &mut capture)?;
    let rotated = rotate_attention(&capture.into_record()?)?;
    let z_rev = reverse_frames_tensor(&z_t, k)?;
    let c_rev = reverse_frames_tensor(&batch.control, k)?;
    let pred = bundle.predict_v(
        &z_rev,
        k,
        &tv,
        &end,
        Some(&c_rev),
        Role::Backward,
        &mut AttentionCtx::inject(&rotated),
    )?;
    mse(&pred, &reverse_frames_tensor(&v, k)?)
}

fn detach_condition(c: ReferenceCondition) -> ReferenceCondition {
    ReferenceCondition {
        tokens: c.tokens.detach(),
        latent: c.latent.detach(),
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn adamw(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Shared optimizer loop: one batch and one loss per iteration.
fn optimize(
    stage: &str,
    cfg: &StageConfig,
    vars: Vec<Var>,
    mut loss_fn: impl FnMut(usize, &mut ChaCha8Rng) -> Result<Tensor>,
) -> Result<StageReport> {
    cfg.validate()?;
    ensure!(!vars.is_empty(), Structural, "stage {stage} has no trainable parameters");
    let mut opt = adamw(vars, cfg.learning_rate, cfg.weight_decay)?;
    let seeds = SeedTree::new(cfg.seed).child(stage);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let mut rng = seeds.index(i as u64).rng();
        let loss = loss_fn(i, &mut rng)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: stage.to_string(),
                iteration: i,
                detail: format!("loss is {value}; last finite losses {:?}", losses.iter().rev().take(3).collect::<Vec<_>>()),
            });
        }
        opt.backward_step(&loss)?;
        if cfg.log_every > 0 && i % cfg.log_every == 0 {
            log::info!("stage {stage} iteration {i}: loss {value:.6}");
        }
        losses.push(value);
    }
    Ok(StageReport {
        stage: stage.to_string(),
        losses,
        warnings: Vec::new(),
    })
}

fn warn_unless(bundle: &ModelBundle, needed: &str, stage: &str) {
    if !bundle.has_stage(needed) {
        log::warn!("stage {stage} usually follows stage {needed}, which this model has not had");
    }
}

/// Train the VAE to reconstruct frames, then set the latent scale so that
/// encoded latents have unit standard deviation.
pub fn train_vae(bundle: &mut ModelBundle, data: &TrainingSet, cfg: &StageConfig) -> Result<StageReport> {
    let dtype = bundle.dtype();
    let k = bundle.config.frames;
    let b: &ModelBundle = bundle;
    let report = optimize("vae", cfg, b.vars(ParamGroup::VaeCore), |_, rng| {
        let batch = data.batch(rng, cfg.batch_size, k, dtype)?;
        let z = b.vae.encode(&batch.hq)?;
        let recon = b.vae.decode(&z, false)?;
        Ok((mse(&recon, &batch.hq)? + (z.sqr()?.mean_all()? * 1e-4)?)?)
    })?;
    let mut rng = SeedTree::new(cfg.seed).child("vae-scale").rng();
    let batch = data.batch(&mut rng, data.videos.len().min(8), k, dtype)?;
    let z = bundle.vae.encode(&batch.hq)?.to_dtype(DType::F64)?;
    let scale = scalar(&bundle.vae.latent_scale().as_tensor().squeeze(0)?)?;
    let raw = (z / scale)?;
    let std = scalar(&raw.sqr()?.mean_all()?)?.sqrt();
    ensure!(std.is_finite() && std > 0.0, Structural, "latent standard deviation is {std}");
    let s = Tensor::new(&[1.0 / std], &Device::Cpu)?.to_dtype(dtype)?;
    bundle.store.set("vae.latent_scale", &s)?;
    bundle.record_stage("vae");
    Ok(report)
}

/// Train the image-to-video denoiser and the reference encoder on clean
/// clips conditioned on their ground-truth first frame. Afterwards the
/// backward projections and the control encoder are re-copied from it.
pub fn train_base(bundle: &mut ModelBundle, data: &TrainingSet, cfg: &StageConfig) -> Result<StageReport> {
    warn_unless(bundle, "vae", "base");
    let dtype = bundle.dtype();
    let k = bundle.config.frames;
    let sched = NoiseSchedule::cosine(cfg.train_timesteps)?;
    let b: &ModelBundle = bundle;
    let report = optimize("base", cfg, b.vars(ParamGroup::Base), |_, rng| {
        let batch = data.batch(rng, cfg.batch_size, k, dtype)?;
        let latent_shape = b.vae.encode(&batch.hq)?;
        let draw = NoiseDraw::sample(rng, &latent_shape, batch.clips, cfg.train_timesteps)?;
        v_prediction_loss(b, &batch, &draw, &sched, ReferenceSource::GroundTruth, false)
    })?;
    bundle.sync_backward_attention()?;
    bundle.reclone_controlnet()?;
    bundle.record_stage("base");
    Ok(report)
}

/// Stage 1: only the control branch learns, from degraded clips.
pub fn train_stage1(bundle: &mut ModelBundle, data: &TrainingSet, cfg: &StageConfig) -> Result<StageReport> {
    warn_unless(bundle, "base", "1");
    let dtype = bundle.dtype();
    let k = bundle.config.frames;
    let sched = NoiseSchedule::cosine(cfg.train_timesteps)?;
    let b: &ModelBundle = bundle;
    let report = optimize("1", cfg, b.vars(ParamGroup::ControlNet), |_, rng| {
        let batch = data.batch(rng, cfg.batch_size, k, dtype)?;
        let latent_shape = b.vae.encode(&batch.hq)?;
        let draw = NoiseDraw::sample(rng, &latent_shape, batch.clips, cfg.train_timesteps)?;
        v_prediction_loss(b, &batch, &draw, &sched, cfg.reference, true)
    })?;
    bundle.record_stage("1");
    Ok(report)
}

/// Stage 2: only the backward-role temporal value/output projections learn.
pub fn train_stage2(bundle: &mut ModelBundle, data: &TrainingSet, cfg: &StageConfig) -> Result<StageReport> {
    warn_unless(bundle, "1", "2");
    let dtype = bundle.dtype();
    let k = bundle.config.frames;
    let sched = NoiseSchedule::cosine(cfg.train_timesteps)?;
    let b: &ModelBundle = bundle;
    let report = optimize("2", cfg, b.vars(ParamGroup::BackwardAttention), |_, rng| {
        let batch = data.batch(rng, cfg.batch_size, k, dtype)?;
        let latent_shape = b.vae.encode(&batch.hq)?;
        let draw = NoiseDraw::sample(rng, &latent_shape, batch.clips, cfg.train_timesteps)?;
        backward_role_loss(b, &batch, &draw, &sched, cfg.reference)
    })?;
    bundle.record_stage("2");
    Ok(report)
}

/// Clean latents for each clip of `batch` from the current sampler, without gradient.
pub fn sampled_latents(
    bundle: &ModelBundle,
    batch: &ClipBatch,
    cfg: &StageConfig,
    seeds: &SeedTree,
) -> Result<Tensor> {
    let sched = NoiseSchedule::cosine(cfg.sample_steps)?;
    let opts = SamplerOptions {
        steps: cfg.sample_steps,
        sdedit_strength: cfg.sample_strength,
        bidirectional: cfg.sample_bidirectional,
        tile: None,
        seed: 0,
        vae_adapter: true,
    };
    let (h, w) = batch.hq_clips[0].dims();
    let mut zs = Vec::with_capacity(batch.clips);
    for (i, (hq, lq)) in batch.hq_clips.iter().zip(&batch.lq_clips).enumerate() {
        let (start, end) = match cfg.reference {
            ReferenceSource::GroundTruth => (hq.first().clone(), hq.last().clone()),
            ReferenceSource::UpscaledInput => (
                lq.first().resize_bicubic(h, w),
                lq.last().resize_bicubic(h, w),
            ),
        };
        let (z, _) = sample_latent_traced(
            bundle,
            lq,
            &start,
            Some(&end),
            &sched,
            &opts,
            &seeds.index(i as u64),
            &mut |_| {},
        )?;
        zs.push(z.detach());
    }
    Ok(Tensor::cat(&zs, 0)?)
}

/// Stage 3: the decoder adapter learns from sampled latents with an L2 +
/// perceptual + adversarial loss; the discriminator trains alongside.
pub fn train_stage3(bundle: &mut ModelBundle, data: &TrainingSet, cfg: &StageConfig) -> Result<StageReport> {
    warn_unless(bundle, "2", "3");
    cfg.validate()?;
    ensure!(bundle.vae.has_adapter(), Structural, "the model was built without a decoder adapter");
    let dtype = bundle.dtype();
    let k = bundle.config.frames;
    let percept = PerceptualNet::new(cfg.seed, dtype)?;
    let b: &ModelBundle = bundle;
    let mut gen_opt = adamw(b.vars(ParamGroup::VaeAdapter), cfg.learning_rate, cfg.weight_decay)?;
    let mut disc_opt = adamw(
        b.vars(ParamGroup::Discriminator),
        cfg.learning_rate * cfg.disc_lr_multiplier,
        cfg.weight_decay,
    )?;
    let seeds = SeedTree::new(cfg.seed).child("3");
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut warnings = Vec::new();
    let mut accuracies: Vec<f64> = Vec::new();
    const WINDOW: usize = 20;
    for i in 0..cfg.iterations {
        let iter_seeds = seeds.index(i as u64);
        let mut rng = iter_seeds.child("batch").rng();
        let batch = data.batch(&mut rng, cfg.batch_size, k, dtype)?;
        let z = sampled_latents(b, &batch, cfg, &iter_seeds.child("sample"))?;
        let fake = b.vae.decode(&z, true)?;
        let fake_scores = b.discriminator.forward(&fake)?;
        let loss = ((mse(&fake, &batch.hq)? + (percept.loss(&fake, &batch.hq)? * cfg.percept_weight)?)?
            + (hinge_g_loss(&fake_scores)? * cfg.gan_weight)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: "3".into(),
                iteration: i,
                detail: format!("loss is {value}"),
            });
        }
        gen_opt.backward_step(&loss)?;

        let real_scores = b.discriminator.forward(&batch.hq)?;
        let fake_scores = b.discriminator.forward(&fake.detach())?;
        disc_opt.backward_step(&hinge_d_loss(&real_scores, &fake_scores)?)?;
        accuracies.push(disc_accuracy(&real_scores, &fake_scores)?);
        if accuracies.len() >= WINDOW && warnings.is_empty() {
            let recent = &accuracies[accuracies.len() - WINDOW..];
            if recent.iter().all(|a| (a - 0.5).abs() <= 0.02) {
                let msg = format!(
                    "discriminator accuracy stuck at 0.5 for {WINDOW} iterations (up to {i}); the adversarial term may have collapsed"
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        if cfg.log_every > 0 && i % cfg.log_every == 0 {
            log::info!("stage 3 iteration {i}: loss {value:.6}");
        }
        losses.push(value);
    }
    bundle.record_stage("3");
    Ok(StageReport {
        stage: "3".into(),
        losses,
        warnings,
    })
}

/// Train the reference super-resolution network on single frames.
pub fn train_sr(net: &TinySrNet, data: &TrainingSet, cfg: &StageConfig, k: usize) -> Result<StageReport> {
    optimize("sr", cfg, net.vars(), |_, rng| {
        let batch = data.batch(rng, cfg.batch_size, k, DType::F32)?;
        let pred = net.forward(&batch.control)?;
        mse(&pred, &batch.hq)
    })
}
