//! Temporal self-attention (the only operator that mixes frames), reference
//! cross-attention, and the capture/inject machinery for attention maps.

use candle_core::{DType, Tensor};

use crate::error::{ensure, Error, Result};
use crate::nn::{bmm, softmax_last, GroupNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Forward,
    Backward,
}

/// The attention maps of one temporal site for one pass.
#[derive(Debug, Clone)]
pub struct SiteAttention {
    pub site: String,
    pub heads: usize,
    pub frames: usize,
    /// `(clips * positions, heads, frames, frames)`, rows sum to one.
    pub weights: Tensor,
}

impl SiteAttention {
    /// Number of `frames x frames` matrices held.
    pub fn matrix_count(&self) -> usize {
        self.weights.dims()[0] * self.heads
    }

    pub fn locations(&self) -> usize {
        self.weights.dims()[0]
    }

    /// Matrix `index` (location-major, head-minor) as rows of `f64`.
    pub fn matrix(&self, index: usize) -> Result<Vec<Vec<f64>>> {
        let (loc, head) = (index / self.heads, index % self.heads);
        let m = self
            .weights
            .narrow(0, loc, 1)?
            .narrow(1, head, 1)?
            .reshape((self.frames, self.frames))?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        Ok(m)
    }
}

/// All temporal attention maps captured during one pass, in visiting order.
#[derive(Debug, Clone)]
pub struct TemporalAttentionRecord {
    sites: Vec<SiteAttention>,
}

impl TemporalAttentionRecord {
    pub fn new(sites: Vec<SiteAttention>) -> Result<Self> {
        for (i, s) in sites.iter().enumerate() {
            ensure!(
                sites[..i].iter().all(|o| o.site != s.site),
                Structural,
                "site `{}` recorded twice",
                s.site
            );
            let d = s.weights.dims();
            ensure!(
                d.len() == 4 && d[1] == s.heads && d[2] == s.frames && d[3] == s.frames,
                Structural,
                "site `{}` weights have shape {d:?}",
                s.site
            );
        }
        Ok(Self { sites })
    }

    pub fn sites(&self) -> &[SiteAttention] {
        &self.sites
    }

    pub fn site_names(&self) -> Vec<&str> {
        self.sites.iter().map(|s| s.site.as_str()).collect()
    }

    pub fn site(&self, name: &str) -> Option<&SiteAttention> {
        self.sites.iter().find(|s| s.site == name)
    }

    pub fn matrix_count(&self) -> usize {
        self.sites.iter().map(SiteAttention::matrix_count).sum()
    }

    /// Largest row-sum deviation from one and most negative entry.
    pub fn stochasticity_error(&self) -> Result<(f64, f64)> {
        let mut row_err = 0f64;
        let mut min_entry = f64::INFINITY;
        for s in &self.sites {
            let w = s.weights.to_dtype(DType::F64)?;
            let sums = w.sum(3)?.flatten_all()?.to_vec1::<f64>()?;
            row_err = sums.iter().fold(row_err, |m, v| m.max((v - 1.0).abs()));
            min_entry = min_entry.min(w.flatten_all()?.min(0)?.to_scalar::<f64>()?);
        }
        Ok((row_err, min_entry))
    }

    /// Check the row-stochastic invariant within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (row_err, min_entry) = self.stochasticity_error()?;
        ensure!(
            row_err <= tol && min_entry >= 0.0,
            Structural,
            "attention record not row-stochastic (row error {row_err:e}, min entry {min_entry:e})"
        );
        Ok(())
    }

    /// 180-degree rotation of every matrix: `out[i][j] = in[k-1-i][k-1-j]`.
    pub fn rotated(&self) -> Result<Self> {
        let sites = self
            .sites
            .iter()
            .map(|s| {
                let k = s.frames;
                let rev: Vec<u32> = (0..k as u32).rev().collect();
                let rev = Tensor::from_vec(rev, k, s.weights.device())?;
                let w = s.weights.index_select(&rev, 2)?.index_select(&rev, 3)?;
                Ok(SiteAttention {
                    weights: w,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sites })
    }

    /// Exact equality of site layout and every weight.
    pub fn bitwise_eq(&self, other: &Self) -> Result<bool> {
        if self.site_names() != other.site_names() {
            return Ok(false);
        }
        for (a, b) in self.sites.iter().zip(&other.sites) {
            if a.weights.dims() != b.weights.dims() {
                return Ok(false);
            }
            let a = a.weights.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let b = b.weights.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// What temporal sites do with their softmax output during a pass.
#[derive(Debug, Clone, Copy)]
pub enum AttentionMode<'a> {
    Compute,
    Capture,
    Inject(&'a TemporalAttentionRecord),
}

#[derive(Debug)]
pub struct AttentionCtx<'a> {
    mode: AttentionMode<'a>,
    captured: Vec<SiteAttention>,
}

impl<'a> AttentionCtx<'a> {
    pub fn new(mode: AttentionMode<'a>) -> Self {
        Self {
            mode,
            captured: Vec::new(),
        }
    }

    pub fn compute() -> Self {
        Self::new(AttentionMode::Compute)
    }

    pub fn capture() -> Self {
        Self::new(AttentionMode::Capture)
    }

    pub fn inject(record: &'a TemporalAttentionRecord) -> Self {
        Self::new(AttentionMode::Inject(record))
    }

    pub fn mode(&self) -> AttentionMode<'a> {
        self.mode
    }

    /// Captured maps, in visiting order (empty unless capturing).
    pub fn into_record(self) -> Result<TemporalAttentionRecord> {
        TemporalAttentionRecord::new(self.captured)
    }
}

fn frame_positions(frames: usize, dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f64; frames * dim];
    for f in 0..frames {
        for i in 0..half {
            let freq = (-(100f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data[f * dim + i] = (f as f64 * freq).sin();
            data[f * dim + half + i] = (f as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (frames, dim), device)?.to_dtype(dtype)?)
}

/// Self-attention along the frame axis at every spatial location.
///
/// Frame positions enter only the query/key inputs, so the value path (and
/// therefore the output under an injected map) is position-free.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    site: String,
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    back: Option<(Linear, Linear)>,
    heads: usize,
    channels: usize,
}

impl TemporalAttention {
    /// `with_backward_role` adds the separate value/output projections used in the backward role.
    pub fn new(pb: &ParamBuilder, channels: usize, heads: usize, with_backward_role: bool) -> Result<Self> {
        ensure!(
            channels % heads == 0,
            Contract,
            "{channels} channels do not split into {heads} heads"
        );
        let back = if with_backward_role {
            Some((
                Linear::new(&pb.pp("back_to_v"), channels, channels)?,
                Linear::new(&pb.pp("back_to_out"), channels, channels)?,
            ))
        } else {
            None
        };
        Ok(Self {
            site: pb.prefix().to_string(),
            norm: GroupNorm::new(&pb.pp("norm"), channels)?,
            to_q: Linear::no_bias(&pb.pp("to_q"), channels, channels)?,
            to_k: Linear::no_bias(&pb.pp("to_k"), channels, channels)?,
            to_v: Linear::new(&pb.pp("to_v"), channels, channels)?,
            to_out: Linear::new(&pb.pp("to_out"), channels, channels)?,
            back,
            heads,
            channels,
        })
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    /// `x: (clips * clip_len, C, H, W)`.
    pub fn forward(&self, x: &Tensor, clip_len: usize, role: Role, ctx: &mut AttentionCtx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        ensure!(c == self.channels, Contract, "site `{}` expects {} channels, got {c}", self.site, self.channels);
        ensure!(n % clip_len == 0, Contract, "{n} frames do not split into clips of {clip_len}");
        let clips = n / clip_len;
        let heads = self.heads;
        let d = c / heads;
        let positions = clips * h * w;

        let tokens = self
            .norm
            .forward(x)?
            .reshape((clips, clip_len, c, h, w))?
            .permute((0, 3, 4, 1, 2))?
            .contiguous()?
            .reshape((positions, clip_len, c))?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((positions, clip_len, heads, d))?.transpose(1, 2)?.contiguous()?)
        };

        let (to_v, to_out) = match (role, &self.back) {
            (Role::Backward, Some((v, o))) => (v, o),
            _ => (&self.to_v, &self.to_out),
        };
        let v = split(to_v.forward(&tokens)?)?;

        let attn = match ctx.mode {
            AttentionMode::Inject(record) => {
                let s = record.site(&self.site).ok_or_else(|| {
                    Error::Structural(format!("attention record has no site `{}`", self.site))
                })?;
                let want = [positions, heads, clip_len, clip_len];
                ensure!(
                    s.weights.dims() == want,
                    Structural,
                    "site `{}`: recorded maps {:?}, model needs {want:?}",
                    self.site,
                    s.weights.dims()
                );
                s.weights.to_dtype(x.dtype())?
            }
            AttentionMode::Compute | AttentionMode::Capture => {
                let pos = frame_positions(clip_len, c, x.dtype(), x.device())?;
                let qk_in = tokens.broadcast_add(&pos)?;
                let q = split(self.to_q.forward(&qk_in)?)?;
                let k = split(self.to_k.forward(&qk_in)?)?;
                let scores = (bmm(&q, &k.transpose(2, 3)?)? * (1.0 / (d as f64).sqrt()))?;
                let a = softmax_last(&scores)?;
                if matches!(ctx.mode, AttentionMode::Capture) {
                    ctx.captured.push(SiteAttention {
                        site: self.site.clone(),
                        heads,
                        frames: clip_len,
                        weights: a.detach(),
                    });
                }
                a
            }
        };

        let out = bmm(&attn, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((positions, clip_len, c))?;
        let out = to_out
            .forward(&out)?
            .reshape((clips, h, w, clip_len, c))?
            .permute((0, 3, 4, 1, 2))?
            .contiguous()?
            .reshape((n, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Per-pixel attention from video features to the reference tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(pb: &ParamBuilder, channels: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&pb.pp("norm"), channels)?,
            to_q: Linear::no_bias(&pb.pp("to_q"), channels, channels)?,
            to_k: Linear::no_bias(&pb.pp("to_k"), context_dim, channels)?,
            to_v: Linear::new(&pb.pp("to_v"), context_dim, channels)?,
            to_out: Linear::new(&pb.pp("to_out"), channels, channels)?,
            heads,
        })
    }

    /// `x: (clips * clip_len, C, H, W)`, `context: (clips, T, D)`.
    pub fn forward(&self, x: &Tensor, clip_len: usize, context: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (clips, tokens, _) = context.dims3()?;
        ensure!(
            clips * clip_len == n,
            Contract,
            "context holds {clips} clips for {n} frames of length {clip_len}"
        );
        let heads = self.heads;
        let d = c / heads;
        let len = clip_len * h * w;
        let q_in = self
            .norm
            .forward(x)?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((clips, len, c))?;
        let q = self.to_q.forward(&q_in)?.reshape((clips, len, heads, d))?.transpose(1, 2)?;
        let k = self.to_k.forward(context)?.reshape((clips, tokens, heads, d))?.transpose(1, 2)?;
        let v = self.to_v.forward(context)?.reshape((clips, tokens, heads, d))?.transpose(1, 2)?;
        let scores = (bmm(&q, &k.transpose(2, 3)?)? * (1.0 / (d as f64).sqrt()))?;
        let out = bmm(&softmax_last(&scores)?, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((clips, len, c))?;
        let out = self
            .to_out
            .forward(&out)?
            .reshape((n, h, w, c))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok((x + out)?)
    }
}
