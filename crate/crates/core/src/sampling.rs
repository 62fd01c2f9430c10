//! Forward/backward generation, prediction blending, and the sampling loops.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{AttentionCtx, ModelBundle, ReferenceCondition, Role, TemporalAttentionRecord};
use crate::rng::SeedTree;
use crate::schedule::{denoise_step, sdedit_start, step_pairs, NoiseSchedule, SdeditConfig};
use crate::tiling::{crop, tiled_prediction, tiled_vae_decode, Rect, TileOptions, TilePlan};
use crate::video::{reverse_frames_tensor, Frame, LatentVideo, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOptions {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_strength")]
    pub sdedit_strength: f64,
    #[serde(default = "default_true")]
    pub bidirectional: bool,
    #[serde(default)]
    pub tile: Option<TileOptions>,
    #[serde(default)]
    pub seed: u64,
    /// Decode with the fine-tuned decoder adapter.
    #[serde(default = "default_true")]
    pub vae_adapter: bool,
}

fn default_steps() -> usize {
    30
}
fn default_strength() -> f64 {
    0.6
}
fn default_true() -> bool {
    true
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            sdedit_strength: default_strength(),
            bidirectional: true,
            tile: None,
            seed: 0,
            vae_adapter: true,
        }
    }
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Range, "steps must be at least 1");
        SdeditConfig {
            strength: self.sdedit_strength,
            total_steps: self.steps,
        }
        .remaining_steps()?;
        if let Some(t) = &self.tile {
            ensure!(t.tile > 0, Range, "tile size must be positive");
            ensure!(t.overlap < t.tile, Range, "tile overlap must be smaller than the tile");
        }
        Ok(())
    }
}

/// 180-degree rotation of every attention matrix.
pub fn rotate_attention(rec: &TemporalAttentionRecord) -> Result<TemporalAttentionRecord> {
    rec.rotated()
}

/// Flip the frame axis of a clip-major `(k, ...)` tensor.
pub fn reverse_frames(x: &Tensor) -> Result<Tensor> {
    let k = x.dims().first().copied().unwrap_or(0);
    ensure!(k >= 1, Contract, "cannot reverse an empty frame axis");
    reverse_frames_tensor(x, k)
}

/// Elementwise mean of two predictions.
pub fn blend(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(
        a.dims() == b.dims(),
        Contract,
        "cannot blend {:?} with {:?}",
        a.dims(),
        b.dims()
    );
    Ok(((a + b)? * 0.5)?)
}

/// Conditioning of one clip for one spatial block.
#[derive(Debug, Clone)]
pub struct ClipCondition {
    /// LQ clip upsampled to the output resolution, `(k, 3, H, W)`.
    pub control: Tensor,
    pub start: ReferenceCondition,
    pub end: Option<ReferenceCondition>,
}

impl ClipCondition {
    pub fn new(
        bundle: &ModelBundle,
        control: Tensor,
        start: &Tensor,
        end: Option<&Tensor>,
    ) -> Result<Self> {
        Ok(Self {
            control,
            start: bundle.reference_condition(start)?,
            end: end.map(|e| bundle.reference_condition(e)).transpose()?,
        })
    }
}

fn t_tensor(bundle: &ModelBundle, sched: &NoiseSchedule, t: usize, clips: usize) -> Result<Tensor> {
    let v = vec![sched.embed_value(t); clips];
    Ok(Tensor::from_vec(v, clips, bundle.store.device())?.to_dtype(bundle.dtype())?)
}

/// Forward-role prediction conditioned on the first frame, capturing every
/// temporal attention map.
pub fn forward_generation(
    bundle: &ModelBundle,
    z_t: &Tensor,
    t: usize,
    start: &ReferenceCondition,
    control: &Tensor,
    sched: &NoiseSchedule,
) -> Result<(Tensor, TemporalAttentionRecord)> {
    let k = z_t.dims()[0];
    let tv = t_tensor(bundle, sched, t, 1)?;
    let mut ctx = AttentionCtx::capture();
    let v = bundle.predict_v(z_t, k, &tv, start, Some(control), Role::Forward, &mut ctx)?;
    Ok((v, ctx.into_record()?))
}

/// Backward-role prediction on the reversed clip, conditioned on the end
/// frame, with the rotated forward attention injected at every temporal site.
/// The result is in reversed frame order.
pub fn backward_generation(
    bundle: &ModelBundle,
    z_t: &Tensor,
    t: usize,
    end: &ReferenceCondition,
    control: &Tensor,
    forward_attention: &TemporalAttentionRecord,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let k = z_t.dims()[0];
    let rotated = rotate_attention(forward_attention)?;
    let z_rev = reverse_frames(z_t)?;
    let c_rev = reverse_frames(control)?;
    let tv = t_tensor(bundle, sched, t, 1)?;
    let mut ctx = AttentionCtx::inject(&rotated);
    bundle.predict_v(&z_rev, k, &tv, end, Some(&c_rev), Role::Backward, &mut ctx)
}

/// Per-step values exposed to observers.
#[derive(Debug)]
pub struct StepTrace<'a> {
    pub t: usize,
    pub rect: Rect,
    pub forward: &'a Tensor,
    /// Backward prediction already returned to forward frame order.
    pub backward: Option<&'a Tensor>,
    pub blended: &'a Tensor,
}

/// Prediction for one block at one step.
pub fn step_prediction(
    bundle: &ModelBundle,
    z_t: &Tensor,
    t: usize,
    cond: &ClipCondition,
    bidirectional: bool,
    sched: &NoiseSchedule,
    rect: Rect,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<Tensor> {
    let (p_f, record) = forward_generation(bundle, z_t, t, &cond.start, &cond.control, sched)?;
    let end = match (&cond.end, bidirectional) {
        (Some(end), true) => Some(end),
        (None, true) => {
            return Err(crate::Error::Contract(
                "bidirectional sampling needs an end reference frame".into(),
            ))
        }
        _ => None,
    };
    match end {
        Some(end) => {
            let p_b = backward_generation(bundle, z_t, t, end, &cond.control, &record, sched)?;
            let p_b = reverse_frames(&p_b)?;
            let p_t = blend(&p_b, &p_f)?;
            observer(&StepTrace {
                t,
                rect,
                forward: &p_f,
                backward: Some(&p_b),
                blended: &p_t,
            });
            Ok(p_t)
        }
        None => {
            observer(&StepTrace {
                t,
                rect,
                forward: &p_f,
                backward: None,
                blended: &p_f,
            });
            Ok(p_f)
        }
    }
}

/// Everything the loop needs about one clip at the output resolution.
struct PreparedClip {
    control: Tensor,
    start: Tensor,
    end: Option<Tensor>,
    height: usize,
    width: usize,
}

fn prepare(
    bundle: &ModelBundle,
    lq: &VideoClip,
    start: &Frame,
    end: Option<&Frame>,
) -> Result<PreparedClip> {
    let (height, width) = start.dims();
    if let Some(e) = end {
        ensure!(
            e.dims() == start.dims(),
            Contract,
            "start frame is {height}x{width}, end frame is {:?}",
            e.dims()
        );
    }
    let (lh, lw) = lq.dims();
    ensure!(
        height % lh == 0 && width % lw == 0 && height / lh == width / lw,
        Contract,
        "reference frame {height}x{width} is not an integer upscale of the {lh}x{lw} clip"
    );
    let m = bundle.config.pixel_multiple();
    ensure!(
        height % m == 0 && width % m == 0,
        Contract,
        "output {height}x{width} must be divisible by {m}"
    );
    let (dtype, device) = (bundle.dtype(), bundle.store.device().clone());
    Ok(PreparedClip {
        control: lq.resize_bicubic(height, width).to_tensor(dtype, &device)?,
        start: start.to_tensor(dtype, &device)?,
        end: end.map(|e| e.to_tensor(dtype, &device)).transpose()?,
        height,
        width,
    })
}

/// Denoise one clip to a clean latent; `end == None` gives the unidirectional sampler.
/// Returns the latent and the latent tile plan used.
#[allow(clippy::too_many_arguments)]
pub fn sample_latent_traced(
    bundle: &ModelBundle,
    lq: &VideoClip,
    start: &Frame,
    end: Option<&Frame>,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    seeds: &SeedTree,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<(Tensor, TilePlan)> {
    opts.validate()?;
    ensure!(
        sched.num_steps() == opts.steps,
        Contract,
        "schedule has {} steps, options ask for {}",
        sched.num_steps(),
        opts.steps
    );
    let bidirectional = opts.bidirectional && end.is_some();
    let prep = prepare(bundle, lq, start, if bidirectional { end } else { None })?;
    let f = bundle.vae.factor();
    let (lh, lw) = (prep.height / f, prep.width / f);
    let plan = TilePlan::from_options(lh, lw, opts.tile.as_ref())?;
    if !plan.is_single() {
        let m = bundle.config.latent_multiple();
        ensure!(
            plan.rects.iter().all(|r| r.height % m == 0 && r.width % m == 0),
            Contract,
            "tiles must be multiples of {m} latent cells"
        );
    }

    // Conditions are cropped per tile once, up front: pixels for the control
    // clip and reference tokens, the full-frame latent for the concatenated
    // reference latent.
    let start_latent = bundle.vae.encode(&prep.start)?;
    let end_latent = prep.end.as_ref().map(|e| bundle.vae.encode(e)).transpose()?;
    let tile_reference = |frame: &Tensor, latent: &Tensor, r: &Rect| -> Result<ReferenceCondition> {
        Ok(ReferenceCondition {
            tokens: bundle.reference.forward(&crop(frame, &r.scaled(f))?)?,
            latent: crop(latent, r)?,
        })
    };
    let conds = plan
        .rects
        .iter()
        .map(|r| {
            Ok(ClipCondition {
                control: crop(&prep.control, &r.scaled(f))?,
                start: tile_reference(&prep.start, &start_latent, r)?,
                end: match (&prep.end, &end_latent) {
                    (Some(e), Some(el)) => Some(tile_reference(e, el, r)?),
                    _ => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let lq_latent = LatentVideo::new(bundle.vae.encode(&prep.control)?)?;
    let sd = SdeditConfig {
        strength: opts.sdedit_strength,
        total_steps: opts.steps,
    };
    let mut rng = seeds.child("sdedit").rng();
    let (z, t_start) = sdedit_start(&lq_latent, &sd, sched, &mut rng)?;
    let mut z = z.into_tensor();
    for (t, t_next) in step_pairs(t_start) {
        let p = tiled_prediction(&z, &plan, |rect, z_tile| {
            let idx = plan
                .rects
                .iter()
                .position(|r| r == rect)
                .expect("rect comes from the plan");
            step_prediction(bundle, z_tile, t, &conds[idx], bidirectional, sched, *rect, observer)
        })?;
        z = denoise_step(&z, &p, t, t_next, sched)?;
    }
    Ok((z, plan))
}

/// Run the full loop for one clip and decode; `end == None` gives the unidirectional sampler.
#[allow(clippy::too_many_arguments)]
pub fn sample_clip_traced(
    bundle: &ModelBundle,
    lq: &VideoClip,
    start: &Frame,
    end: Option<&Frame>,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    seeds: &SeedTree,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<VideoClip> {
    let (z, plan) = sample_latent_traced(bundle, lq, start, end, sched, opts, seeds, observer)?;
    let f = bundle.vae.factor();
    let adapter = opts.vae_adapter;
    let feather = opts.tile.map(|t| t.feather).unwrap_or(0);
    let pixels = tiled_vae_decode(&z, &plan, f, feather, |zt| bundle.vae.decode(zt, adapter))?;
    VideoClip::from_tensor(&pixels.clamp(0f32, 1f32)?)
}

/// Bidirectional sampling of one clip (`opts.bidirectional == false` falls back to unidirectional).
pub fn bidirectional_sample(
    bundle: &ModelBundle,
    lq: &VideoClip,
    start: &Frame,
    end: &Frame,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<VideoClip> {
    let seeds = SeedTree::new(opts.seed);
    sample_clip_traced(bundle, lq, start, Some(end), sched, opts, &seeds, &mut |_| {})
}

/// Forward-only sampling conditioned on the first frame.
pub fn unidirectional_sample(
    bundle: &ModelBundle,
    lq: &VideoClip,
    start: &Frame,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<VideoClip> {
    let seeds = SeedTree::new(opts.seed);
    sample_clip_traced(bundle, lq, start, None, sched, opts, &seeds, &mut |_| {})
}
