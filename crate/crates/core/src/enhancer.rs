//! Single-image super-resolution used to produce the high-quality keyframes.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, NamedArray};
use crate::error::{ensure, Error, Result};
use crate::nn::{Conv2d, ParamStore, Padding};
use crate::rng::SeedTree;
use crate::video::Frame;

/// Upscales one low-quality frame by an integer factor.
///
/// Implementations must be safe to call from several threads.
pub trait ReferenceEnhancer: Send + Sync {
    fn name(&self) -> &str;

    fn scale(&self) -> usize;

    /// `index` is the 0-based position of `frame` in the video being processed.
    fn enhance_frame(&self, frame: &Frame, index: usize) -> Result<Frame>;

    /// [`enhance_frame`](Self::enhance_frame) with the output shape checked.
    fn enhance(&self, frame: &Frame, index: usize) -> Result<Frame> {
        let out = self.enhance_frame(frame, index)?;
        let want = (frame.height() * self.scale(), frame.width() * self.scale());
        if out.dims() != want {
            return Err(Error::Enhancer {
                name: self.name().to_string(),
                detail: format!("produced {:?}, expected {want:?}", out.dims()),
            });
        }
        Ok(out)
    }
}

/// Bicubic resize.
#[derive(Debug, Clone)]
pub struct IdentityUpscaler {
    pub scale: usize,
}

impl ReferenceEnhancer for IdentityUpscaler {
    fn name(&self) -> &str {
        "identity"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn enhance_frame(&self, frame: &Frame, _index: usize) -> Result<Frame> {
        Ok(frame.resize_bicubic(frame.height() * self.scale, frame.width() * self.scale))
    }
}

/// Returns stored ground-truth frames. Indices past the end return the last
/// frame, matching how videos are padded by repetition.
#[derive(Debug, Clone)]
pub struct OracleEnhancer {
    frames: Vec<Frame>,
    scale: usize,
}

impl OracleEnhancer {
    pub fn new(frames: Vec<Frame>, scale: usize) -> Result<Self> {
        ensure!(!frames.is_empty(), Contract, "oracle enhancer needs at least one frame");
        ensure!(scale >= 1, Range, "scale must be positive");
        Ok(Self { frames, scale })
    }
}

impl ReferenceEnhancer for OracleEnhancer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn enhance_frame(&self, _frame: &Frame, index: usize) -> Result<Frame> {
        Ok(self.frames[index.min(self.frames.len() - 1)].clone())
    }
}

/// Runs `<command> <input.png> <output.png>` per frame; the command must exit 0.
#[derive(Debug, Clone)]
pub struct ExternalEnhancer {
    program: String,
    args: Vec<String>,
    scale: usize,
}

impl ExternalEnhancer {
    /// `command` is split on whitespace into a program and leading arguments.
    pub fn new(command: &str, scale: usize) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("external enhancer command is empty".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
            scale,
        })
    }
}

impl ReferenceEnhancer for ExternalEnhancer {
    fn name(&self) -> &str {
        &self.program
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn enhance_frame(&self, frame: &Frame, _index: usize) -> Result<Frame> {
        let fail = |detail: String| Error::Enhancer {
            name: self.program.clone(),
            detail,
        };
        let dir = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("output.png");
        std::fs::write(&input, frame.to_png_bytes()?).map_err(|e| Error::io(&input, e))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| fail(format!("could not start: {e}")))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        let bytes = std::fs::read(&output).map_err(|e| Error::io(&output, e))?;
        Frame::from_png_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SrManifest {
    kind: String,
    width: usize,
    scale: usize,
    seed: u64,
}

const SR_KIND: &str = "bivsr-sr";

/// Bicubic upscale followed by a small residual convolutional refinement.
#[derive(Debug, Clone)]
pub struct TinySrNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
    width: usize,
    scale: usize,
    seed: u64,
}

impl TinySrNet {
    pub fn new(width: usize, scale: usize, seed: u64) -> Result<Self> {
        ensure!(scale >= 1 && width >= 1, Range, "width and scale must be positive");
        let store = ParamStore::new(DType::F32);
        let pb = store.builder(SeedTree::new(seed).child("sr"));
        let rep = |c: Conv2d| c.with_padding(Padding::Replicate);
        let convs = vec![
            rep(Conv2d::new(&pb.pp("conv0"), 3, width, 3, 1)?),
            rep(Conv2d::new(&pb.pp("conv1"), width, width, 3, 1)?),
            rep(Conv2d::new(&pb.pp("conv2"), width, width, 3, 1)?),
            rep(Conv2d::zeroed(&pb.pp("conv_out"), width, 3, 3)?),
        ];
        Ok(Self {
            store,
            convs,
            width,
            scale,
            seed,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.select(|_| true).into_iter().map(|(_, v)| v).collect()
    }

    /// Refine bicubically upscaled frames `(N, 3, H, W)`.
    pub fn forward(&self, upscaled: &Tensor) -> Result<Tensor> {
        let last = self.convs.len() - 1;
        let mut h = upscaled.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok((upscaled + h)?)
    }

    pub fn upscale_input(&self, frame: &Frame) -> Frame {
        frame.resize_bicubic(frame.height() * self.scale, frame.width() * self.scale)
    }

    pub fn to_container(&self) -> Result<Container> {
        let manifest = serde_json::to_string(&SrManifest {
            kind: SR_KIND.into(),
            width: self.width,
            scale: self.scale,
            seed: self.seed,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        let arrays = self
            .store
            .snapshot()
            .iter()
            .map(|(k, t)| Ok((k.clone(), NamedArray::from_tensor(t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Container { manifest, arrays })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m: SrManifest = serde_json::from_str(&c.manifest).map_err(|e| Error::Format {
            what: "checkpoint manifest",
            detail: e.to_string(),
        })?;
        ensure!(
            m.kind == SR_KIND,
            Structural,
            "checkpoint holds a `{}`, not an SR network",
            m.kind
        );
        let net = Self::new(m.width, m.scale, m.seed)?;
        let values = c
            .arrays
            .iter()
            .map(|(k, a)| Ok((k.clone(), a.to_tensor(net.store.device())?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        net.store.load(&values)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl ReferenceEnhancer for TinySrNet {
    fn name(&self) -> &str {
        "net"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn enhance_frame(&self, frame: &Frame, _index: usize) -> Result<Frame> {
        let up = self.upscale_input(frame).to_tensor(DType::F32, self.store.device())?;
        Frame::from_tensor(&self.forward(&up)?.clamp(0f32, 1f32)?.get(0)?)
    }
}
