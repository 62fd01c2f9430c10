//! Spatial tiling: overlapping latent blocks denoised independently and
//! averaged, and blockwise VAE decoding blended with feathered weights.
//!
//! All reductions run in the fixed scan order of [`TilePlan::rects`], so
//! results do not depend on the order closures are evaluated in.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn scaled(&self, f: usize) -> Rect {
        Rect {
            top: self.top * f,
            left: self.left * f,
            height: self.height * f,
            width: self.width * f,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom()).contains(&y) && (self.left..self.right()).contains(&x)
    }
}

/// Tile sizes in latent cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileOptions {
    pub tile: usize,
    pub overlap: usize,
    /// Width in pixels of the decode blending ramps.
    pub feather: usize,
}

impl TileOptions {
    /// Overlap defaults to a quarter of the tile.
    pub fn with_default_overlap(tile: usize) -> Self {
        Self {
            tile,
            overlap: tile / 4,
            feather: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub rects: Vec<Rect>,
}

fn axis_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let stride = tile - overlap;
    let mut starts = vec![0];
    while starts.last().copied().unwrap_or(0) + tile < len {
        let next = (starts.last().copied().unwrap_or(0) + stride).min(len - tile);
        starts.push(next);
    }
    starts
}

/// Grid of `tile_h x tile_w` rects with stride `tile - overlap`; the last row
/// and column are clamped to the boundary. Tiles larger than the domain are
/// shrunk to it.
pub fn plan_tiles(h: usize, w: usize, tile_h: usize, tile_w: usize, overlap: usize) -> Result<TilePlan> {
    ensure!(h > 0 && w > 0, Range, "empty tiling domain {h}x{w}");
    ensure!(tile_h > 0 && tile_w > 0, Range, "tile size must be positive");
    let (th, tw) = (tile_h.min(h), tile_w.min(w));
    ensure!(
        overlap < tile_h && overlap < tile_w,
        Range,
        "overlap {overlap} must be smaller than the tile ({tile_h}x{tile_w})"
    );
    let oy = overlap.min(th.saturating_sub(1));
    let ox = overlap.min(tw.saturating_sub(1));
    let mut rects = Vec::new();
    for &top in &axis_starts(h, th, oy) {
        for &left in &axis_starts(w, tw, ox) {
            rects.push(Rect {
                top,
                left,
                height: th,
                width: tw,
            });
        }
    }
    Ok(TilePlan {
        height: h,
        width: w,
        rects,
    })
}

impl TilePlan {
    pub fn single(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rects: vec![Rect {
                top: 0,
                left: 0,
                height,
                width,
            }],
        }
    }

    pub fn from_options(h: usize, w: usize, opts: Option<&TileOptions>) -> Result<Self> {
        match opts {
            Some(o) if o.tile < h || o.tile < w => plan_tiles(h, w, o.tile, o.tile, o.overlap),
            _ => Ok(Self::single(h, w)),
        }
    }

    pub fn is_single(&self) -> bool {
        self.rects.len() == 1
    }

    pub fn scaled(&self, f: usize) -> TilePlan {
        TilePlan {
            height: self.height * f,
            width: self.width * f,
            rects: self.rects.iter().map(|r| r.scaled(f)).collect(),
        }
    }

    /// Number of rects covering each cell, row-major.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.height * self.width];
        for r in &self.rects {
            for y in r.top..r.bottom() {
                for x in r.left..r.right() {
                    c[y * self.width + x] += 1;
                }
            }
        }
        c
    }
}

/// Crop a `(N, C, H, W)` tensor to `rect`.
pub fn crop(t: &Tensor, rect: &Rect) -> Result<Tensor> {
    Ok(t
        .narrow(2, rect.top, rect.height)?
        .narrow(3, rect.left, rect.width)?
        .contiguous()?)
}

/// Weighted accumulation of per-rect blocks into a full `(N, C, H, W)` field.
struct Accumulator {
    dims: (usize, usize, usize, usize),
    sum: Vec<f64>,
    weight: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            dims: (n, c, h, w),
            sum: vec![0.0; n * c * h * w],
            weight: vec![0.0; h * w],
        }
    }

    fn add(&mut self, rect: &Rect, block: &Tensor, cell_weight: &[f64]) -> Result<()> {
        let (n, c, h, w) = self.dims;
        let want = [n, c, rect.height, rect.width];
        ensure!(
            block.dims() == want,
            Contract,
            "tile closure returned {:?}, expected {want:?}",
            block.dims()
        );
        let data = block.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (bh, bw) = (rect.height, rect.width);
        for y in 0..bh {
            for x in 0..bw {
                self.weight[(rect.top + y) * w + rect.left + x] += cell_weight[y * bw + x];
            }
        }
        for p in 0..n * c {
            for y in 0..bh {
                for x in 0..bw {
                    let v = data[(p * bh + y) * bw + x] * cell_weight[y * bw + x];
                    self.sum[(p * h + rect.top + y) * w + rect.left + x] += v;
                }
            }
        }
        Ok(())
    }

    fn finish(self, like: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = self.dims;
        ensure!(
            self.weight.iter().all(|&v| v > 0.0),
            Contract,
            "tile plan leaves cells uncovered"
        );
        let hw = h * w;
        let out: Vec<f64> = self
            .sum
            .iter()
            .enumerate()
            .map(|(i, s)| s / self.weight[i % hw])
            .collect();
        Ok(Tensor::from_vec(out, (n, c, h, w), like.device())?.to_dtype(like.dtype())?)
    }
}

/// Evaluate `predict(rect, crop(z, rect))` for every rect and average the
/// results over covering tiles. A single full-domain tile returns the closure
/// output unchanged.
pub fn tiled_prediction(
    z: &Tensor,
    plan: &TilePlan,
    mut predict: impl FnMut(&Rect, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let (n, c, h, w) = z.dims4()?;
    ensure!(
        (h, w) == (plan.height, plan.width),
        Contract,
        "tile plan is {}x{}, latent is {h}x{w}",
        plan.height,
        plan.width
    );
    if plan.is_single() && plan.rects[0] == TilePlan::single(h, w).rects[0] {
        let out = predict(&plan.rects[0], z)?;
        ensure!(out.dims() == z.dims(), Contract, "tile closure changed the shape");
        return Ok(out);
    }
    let mut acc = Accumulator::new(n, c, h, w);
    for rect in &plan.rects {
        let block = predict(rect, &crop(z, rect)?)?;
        acc.add(rect, &block, &vec![1.0; rect.height * rect.width])?;
    }
    acc.finish(z)
}

fn ramp(len: usize, feather: usize, at_start: bool, at_end: bool) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut v = 1f64;
            if feather > 0 {
                let denom = (feather + 1) as f64;
                if !at_start {
                    v = v.min((i + 1) as f64 / denom);
                }
                if !at_end {
                    v = v.min((len - i) as f64 / denom);
                }
            }
            v
        })
        .collect()
}

/// Unnormalized blending weight of each pixel of `rect`: linear ramps of
/// width `feather` on sides that border the interior of the domain.
pub fn feather_weights(plan: &TilePlan, rect: &Rect, feather: usize) -> Vec<f64> {
    let ry = ramp(rect.height, feather, rect.top == 0, rect.bottom() == plan.height);
    let rx = ramp(rect.width, feather, rect.left == 0, rect.right() == plan.width);
    ry.iter().flat_map(|a| rx.iter().map(move |b| a * b)).collect()
}

/// Normalized weight field of every rect over the full domain (row-major);
/// the fields sum to one at every pixel.
pub fn blend_fields(plan: &TilePlan, feather: usize) -> Vec<Vec<f64>> {
    let hw = plan.height * plan.width;
    let mut total = vec![0f64; hw];
    let mut fields: Vec<Vec<f64>> = plan
        .rects
        .iter()
        .map(|r| {
            let local = feather_weights(plan, r, feather);
            let mut f = vec![0f64; hw];
            for y in 0..r.height {
                for x in 0..r.width {
                    let idx = (r.top + y) * plan.width + r.left + x;
                    f[idx] = local[y * r.width + x];
                    total[idx] += f[idx];
                }
            }
            f
        })
        .collect();
    for f in &mut fields {
        for (v, t) in f.iter_mut().zip(&total) {
            if *t > 0.0 {
                *v /= t;
            }
        }
    }
    fields
}

/// Decode each latent tile independently and blend the pixel blocks.
/// `decode` maps a `(N, C, h, w)` latent crop to `(N, 3, h*f, w*f)` pixels.
pub fn tiled_vae_decode(
    z: &Tensor,
    plan: &TilePlan,
    factor: usize,
    feather: usize,
    mut decode: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let (n, _, h, w) = z.dims4()?;
    ensure!(
        (h, w) == (plan.height, plan.width),
        Contract,
        "tile plan is {}x{}, latent is {h}x{w}",
        plan.height,
        plan.width
    );
    if plan.is_single() {
        return decode(z);
    }
    let pixels = plan.scaled(factor);
    let mut acc: Option<Accumulator> = None;
    let mut like = None;
    for (lr, pr) in plan.rects.iter().zip(&pixels.rects) {
        let block = decode(&crop(z, lr)?)?;
        let c = block.dims()[1];
        let a = acc.get_or_insert_with(|| Accumulator::new(n, c, pixels.height, pixels.width));
        a.add(pr, &block, &feather_weights(&pixels, pr, feather))?;
        like.get_or_insert(block);
    }
    let like = like.expect("plan has at least one rect");
    acc.expect("plan has at least one rect").finish(&like)
}
