//! Reference-based quality metrics and the evaluation report.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flow::FlowField;
use crate::video::{Frame, VideoClip, CHANNELS};

/// Value reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

fn same_geometry(a: &VideoClip, b: &VideoClip) -> Result<()> {
    ensure!(
        a.len() == b.len() && a.dims() == b.dims(),
        Contract,
        "videos differ in shape: {} frames {:?} vs {} frames {:?}",
        a.len(),
        a.dims(),
        b.len(),
        b.dims()
    );
    Ok(())
}

pub fn frame_mse(a: &Frame, b: &Frame) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        / n
}

pub fn frame_psnr(a: &Frame, b: &Frame, peak: f64) -> f64 {
    let mse = frame_mse(a, b);
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// Per-frame PSNR in dB, averaged over frames.
pub fn psnr(a: &VideoClip, b: &VideoClip, peak: f64) -> Result<f64> {
    same_geometry(a, b)?;
    let sum: f64 = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| frame_psnr(x, y, peak))
        .sum();
    Ok(sum / a.len() as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn plane_ssim(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64], peak: f64) -> f64 {
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let e_aa = filter_valid(&prod(a, a), h, w, g);
    let e_bb = filter_valid(&prod(b, b), h, w, g);
    let e_ab = filter_valid(&prod(a, b), h, w, g);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

pub fn frame_ssim(a: &Frame, b: &Frame, window: usize, peak: f64) -> Result<f64> {
    ensure!(window % 2 == 1, Range, "SSIM window must be odd, got {window}");
    let (h, w) = a.dims();
    ensure!(
        h >= window && w >= window,
        Range,
        "frame {h}x{w} is smaller than the {window}x{window} SSIM window"
    );
    let g = gaussian_window(window, 1.5);
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let pa: Vec<f64> = a.plane(c).iter().map(|v| f64::from(*v)).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|v| f64::from(*v)).collect();
        total += plane_ssim(&pa, &pb, h, w, &g, peak);
    }
    Ok(total / CHANNELS as f64)
}

/// Mean Gaussian-window SSIM (sigma 1.5, standard constants) over channels and frames.
pub fn ssim(a: &VideoClip, b: &VideoClip, window: usize, peak: f64) -> Result<f64> {
    same_geometry(a, b)?;
    let mut total = 0.0;
    for (x, y) in a.frames().iter().zip(b.frames()) {
        total += frame_ssim(x, y, window, peak)?;
    }
    Ok(total / a.len() as f64)
}

fn bilinear(frame: &Frame, c: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (h, w) = frame.dims();
    let (y0, x0) = (y0 as usize, x0 as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let p = |yy: usize, xx: usize| f64::from(frame.at(c, yy, xx));
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

/// Frame `t` resampled onto the grid of frame `t+1`. Pixels whose source
/// falls outside the frame are `None`.
pub fn warp_previous(prev: &Frame, flow: &FlowField) -> Vec<Option<[f64; CHANNELS]>> {
    let (h, w) = prev.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let sy = y as f64 - f64::from(v);
            let sx = x as f64 - f64::from(u);
            if !(sy >= 0.0 && sx >= 0.0 && sy <= (h - 1) as f64 && sx <= (w - 1) as f64) {
                out.push(None);
                continue;
            }
            let mut px = [0f64; CHANNELS];
            for (c, p) in px.iter_mut().enumerate() {
                *p = bilinear(prev, c, sy, sx);
            }
            out.push(Some(px));
        }
    }
    out
}

/// Flow-warping error: per consecutive pair, the mean squared difference
/// between frame `t+1` and the warped frame `t` over in-bounds pixels at
/// least `border` pixels from the edge; averaged over pairs and scaled by 1e3.
pub fn flow_warp_error_with_border(video: &VideoClip, flows: &[FlowField], border: usize) -> Result<f64> {
    ensure!(
        flows.len() + 1 == video.len(),
        Contract,
        "{} flows for {} frames (need one per consecutive pair)",
        flows.len(),
        video.len()
    );
    let (h, w) = video.dims();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (t, flow) in flows.iter().enumerate() {
        ensure!(
            flow.dims() == (h, w),
            Contract,
            "flow {t} is {:?}, frames are {h}x{w}",
            flow.dims()
        );
        let next = video.frame(t + 1);
        let warped = warp_previous(video.frame(t), flow);
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in border..h.saturating_sub(border) {
            for x in border..w.saturating_sub(border) {
                if let Some(px) = warped[y * w + x] {
                    for (c, p) in px.iter().enumerate() {
                        sum += (f64::from(next.at(c, y, x)) - p).powi(2);
                    }
                    count += CHANNELS;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { 1e3 * total / pairs as f64 })
}

pub fn flow_warp_error(video: &VideoClip, flows: &[FlowField]) -> Result<f64> {
    flow_warp_error_with_border(video, flows, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub e_warp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub videos: Vec<VideoMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub e_warp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricReport {
    /// Aggregates are arithmetic means; videos are ordered by id.
    pub fn from_videos(mut videos: Vec<VideoMetrics>, config_hash: Option<String>) -> Result<Self> {
        ensure!(!videos.is_empty(), Contract, "a report needs at least one video");
        videos.sort_by(|a, b| a.id.cmp(&b.id));
        let n = videos.len() as f64;
        let psnr = videos.iter().map(|v| v.psnr).sum::<f64>() / n;
        let ssim = videos.iter().map(|v| v.ssim).sum::<f64>() / n;
        let e_warp = if videos.iter().all(|v| v.e_warp.is_some()) {
            Some(videos.iter().filter_map(|v| v.e_warp).sum::<f64>() / n)
        } else {
            None
        };
        Ok(Self {
            videos,
            psnr,
            ssim,
            e_warp,
            config_hash,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "metric report",
            detail: e.to_string(),
        })
    }
}

/// Evaluate one prediction against ground truth (peak 1, 7-pixel SSIM window).
pub fn evaluate(id: &str, pred: &VideoClip, gt: &VideoClip, flows: Option<&[FlowField]>) -> Result<VideoMetrics> {
    Ok(VideoMetrics {
        id: id.to_string(),
        psnr: psnr(pred, gt, 1.0)?,
        ssim: ssim(pred, gt, 7, 1.0)?,
        e_warp: flows.map(|f| flow_warp_error(pred, f)).transpose()?,
    })
}

/// Run `<command> <frame_dir>` and parse its standard output as one number.
pub fn external_metric(command: &str, frame_dir: &Path) -> Result<f64> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::Config("external metric command is empty".into()))?;
    let output = Command::new(program)
        .args(parts)
        .arg(frame_dir)
        .output()
        .map_err(|e| Error::io(Path::new(program), e))?;
    let text = String::from_utf8_lossy(&output.stdout);
    if !output.status.success() {
        return Err(Error::Format {
            what: "external metric",
            detail: format!("`{program}` exited with {}", output.status),
        });
    }
    text.trim().parse::<f64>().map_err(|_| Error::Format {
        what: "external metric output",
        detail: format!("`{}` is not a number", text.trim()),
    })
}
