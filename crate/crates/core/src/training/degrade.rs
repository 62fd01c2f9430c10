//! Synthetic degradation from ground-truth clips to low-quality inputs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::video::{Frame, VideoClip, CHANNELS};

/// Blur, downsample, add noise, then optionally quantize. Blur and noise
/// strengths are drawn once per clip. Noise is in 8-bit intensity levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    #[serde(default = "d_blur")]
    pub blur_sigma_range: [f64; 2],
    #[serde(default = "d_factor")]
    pub downscale_factor: usize,
    #[serde(default = "d_noise")]
    pub noise_sigma_range: [f64; 2],
    #[serde(default)]
    pub quant_levels: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

fn d_blur() -> [f64; 2] {
    [0.4, 1.2]
}
fn d_factor() -> usize {
    4
}
fn d_noise() -> [f64; 2] {
    [0.0, 3.0]
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: d_blur(),
            downscale_factor: d_factor(),
            noise_sigma_range: d_noise(),
            quant_levels: None,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: [0.0, 0.0],
            downscale_factor: 1,
            noise_sigma_range: [0.0, 0.0],
            quant_levels: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("blur", self.blur_sigma_range), ("noise", self.noise_sigma_range)] {
            ensure!(
                lo >= 0.0 && lo <= hi && hi.is_finite(),
                Config,
                "{name} sigma range [{lo}, {hi}] is invalid"
            );
        }
        ensure!(self.downscale_factor >= 1, Config, "downscale factor must be at least 1");
        if let Some(q) = self.quant_levels {
            ensure!(q >= 2, Config, "quantization needs at least 2 levels, got {q}");
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = frame.dims();
    let mut tmp = vec![0f64; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                tmp[(c * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        kv * f64::from(frame.at(c, y, xx))
                    })
                    .sum();
            }
        }
    }
    Frame::from_fn(h, w, |c, y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                kv * tmp[(c * h + yy) * w + x]
            })
            .sum::<f64>() as f32
    })
}

/// Degrade a clip; all randomness comes from `rng`.
pub fn degrade<R: Rng + ?Sized>(hq: &VideoClip, cfg: &DegradationConfig, rng: &mut R) -> Result<VideoClip> {
    cfg.validate()?;
    let (h, w) = hq.dims();
    let f = cfg.downscale_factor;
    ensure!(
        h % f == 0 && w % f == 0,
        Contract,
        "{h}x{w} frames are not divisible by the downscale factor {f}"
    );
    let blur = draw(rng, cfg.blur_sigma_range);
    let noise = draw(rng, cfg.noise_sigma_range) / 255.0;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Vec::with_capacity(hq.len());
    for frame in hq.frames() {
        let mut out = gaussian_blur(frame, blur);
        if f > 1 {
            out = out.resize_bicubic(h / f, w / f);
        }
        if noise > 0.0 {
            for v in out.data_mut() {
                *v += (noise * normal.sample(rng)) as f32;
            }
        }
        if let Some(levels) = cfg.quant_levels {
            let q = (levels - 1) as f32;
            for v in out.data_mut() {
                *v = ((*v).clamp(0.0, 1.0) * q).round() / q;
            }
        }
        frames.push(out);
    }
    VideoClip::new(frames)
}
