//! Long videos as uniform clips that share exactly one boundary frame.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::enhancer::ReferenceEnhancer;
use crate::error::{ensure, Result};
use crate::model::ModelBundle;
use crate::rng::SeedTree;
use crate::sampling::{sample_clip_traced, SamplerOptions};
use crate::schedule::NoiseSchedule;
use crate::video::{Frame, VideoClip};

/// Clips as inclusive, 1-indexed frame ranges over the padded video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPlan {
    pub n: usize,
    pub k: usize,
    pub pad_count: usize,
    pub clips: Vec<(usize, usize)>,
}

/// Stride `k - 1`; the video is padded by `pad_count` repeated final frames
/// so that the clips tile it exactly.
pub fn plan_clips(n: usize, k: usize) -> Result<ClipPlan> {
    ensure!(n >= 2, Range, "need at least 2 frames, got {n}");
    ensure!(k >= 2, Range, "clip length must be at least 2, got {k}");
    let stride = k - 1;
    let pad_count = (stride - (n - 1) % stride) % stride;
    let total = n + pad_count;
    let clips = (0..(total - 1) / stride)
        .map(|i| (1 + i * stride, 1 + i * stride + stride))
        .collect();
    Ok(ClipPlan {
        n,
        k,
        pad_count,
        clips,
    })
}

impl ClipPlan {
    pub fn padded_len(&self) -> usize {
        self.n + self.pad_count
    }

    /// Distinct clip boundary indices (1-indexed), ascending.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.clips.iter().map(|c| c.0).collect();
        if let Some(last) = self.clips.last() {
            b.push(last.1);
        }
        b
    }

    /// Append `pad_count` copies of the final frame.
    pub fn pad(&self, video: &VideoClip) -> Result<VideoClip> {
        ensure!(
            video.len() == self.n,
            Contract,
            "plan is for {} frames, video has {}",
            self.n,
            video.len()
        );
        let mut frames = video.frames().to_vec();
        frames.extend(std::iter::repeat_n(video.last().clone(), self.pad_count));
        VideoClip::new(frames)
    }

    /// Concatenate per-clip outputs keeping the earlier copy of each shared
    /// frame, then drop the padding.
    pub fn stitch(&self, outputs: Vec<VideoClip>) -> Result<VideoClip> {
        ensure!(
            outputs.len() == self.clips.len(),
            Contract,
            "{} clip outputs for {} clips",
            outputs.len(),
            self.clips.len()
        );
        let mut frames = Vec::with_capacity(self.padded_len());
        for (i, clip) in outputs.into_iter().enumerate() {
            ensure!(clip.len() == self.k, Contract, "clip {i} has {} frames, expected {}", clip.len(), self.k);
            let skip = usize::from(i > 0);
            frames.extend(clip.into_frames().into_iter().skip(skip));
        }
        frames.truncate(self.n);
        VideoClip::new(frames)
    }
}

/// Enhance each boundary frame once; adjacent clips receive the same `Arc`.
pub fn enhance_keyframes(
    video: &VideoClip,
    plan: &ClipPlan,
    enhancer: &dyn ReferenceEnhancer,
) -> Result<BTreeMap<usize, Arc<Frame>>> {
    ensure!(
        video.len() == plan.padded_len(),
        Contract,
        "video has {} frames, plan expects {} after padding",
        video.len(),
        plan.padded_len()
    );
    let mut out = BTreeMap::new();
    for (ci, &(start, end)) in plan.clips.iter().enumerate() {
        for idx in [start, end] {
            if out.contains_key(&idx) {
                continue;
            }
            let hq = enhancer
                .enhance(video.frame(idx - 1), idx - 1)
                .map_err(|e| e.in_clip(ci))?;
            out.insert(idx, Arc::new(hq));
        }
    }
    Ok(out)
}

/// How each clip of a long video is conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipConditioning {
    /// Start and end keyframes, options decide the sampler direction.
    SharedKeyframes,
    /// Each clip samples forward from its own start keyframe only.
    IndependentForward,
}

/// Super-resolve a video of any length `>= 2`.
pub fn run_long_vsr(
    video: &VideoClip,
    enhancer: &dyn ReferenceEnhancer,
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<VideoClip> {
    run_clips(video, enhancer, bundle, sched, opts, ClipConditioning::SharedKeyframes)
}

pub fn run_clips(
    video: &VideoClip,
    enhancer: &dyn ReferenceEnhancer,
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    conditioning: ClipConditioning,
) -> Result<VideoClip> {
    let (plan, outputs) = sample_clips(video, enhancer, bundle, sched, opts, conditioning)?;
    plan.stitch(outputs)
}

/// Per-clip outputs before stitching; adjacent outputs both contain their shared frame.
pub fn sample_clips(
    video: &VideoClip,
    enhancer: &dyn ReferenceEnhancer,
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
    conditioning: ClipConditioning,
) -> Result<(ClipPlan, Vec<VideoClip>)> {
    let plan = plan_clips(video.len(), bundle.config.frames)?;
    let padded = plan.pad(video)?;
    let keys = enhance_keyframes(&padded, &plan, enhancer)?;
    let seeds = SeedTree::new(opts.seed);
    let mut outputs = Vec::with_capacity(plan.clips.len());
    for (ci, &(start, end)) in plan.clips.iter().enumerate() {
        let lq = padded.slice(start - 1, plan.k)?;
        let h1 = &keys[&start];
        let hk = match conditioning {
            ClipConditioning::SharedKeyframes => Some(keys[&end].as_ref()),
            ClipConditioning::IndependentForward => None,
        };
        let clip_seeds = seeds.child("clip").index(ci as u64);
        let out = sample_clip_traced(bundle, &lq, h1, hk, sched, opts, &clip_seeds, &mut |_| {})
            .map_err(|e| e.in_clip(ci))?;
        outputs.push(out);
    }
    Ok((plan, outputs))
}

/// Mean absolute difference between the two versions of each shared
/// boundary frame: the last frame of clip `i` and the first of clip `i + 1`.
/// `None` for a single clip.
pub fn seam_discrepancy(outputs: &[VideoClip]) -> Result<Option<f64>> {
    if outputs.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for pair in outputs.windows(2) {
        let (a, b) = (pair[0].last(), pair[1].first());
        ensure!(a.dims() == b.dims(), Contract, "adjacent clips differ in frame size");
        let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| f64::from((x - y).abs())).sum();
        total += sum / a.data().len() as f64;
    }
    Ok(Some(total / (outputs.len() - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_frames_in_three_clips() {
        let p = plan_clips(40, 14).unwrap();
        assert_eq!(p.clips, vec![(1, 14), (14, 27), (27, 40)]);
        assert_eq!(p.pad_count, 0);
        assert_eq!(p.boundaries(), vec![1, 14, 27, 40]);
    }

    #[test]
    fn remainder_is_padded() {
        let p = plan_clips(15, 14).unwrap();
        assert_eq!(p.pad_count, 12);
        assert_eq!(p.clips, vec![(1, 14), (14, 27)]);
        assert_eq!(plan_clips(14, 14).unwrap().clips, vec![(1, 14)]);
    }

    #[test]
    fn degenerate_sizes_are_range_errors() {
        assert!(plan_clips(1, 4).is_err());
        assert!(plan_clips(10, 1).is_err());
    }
}
