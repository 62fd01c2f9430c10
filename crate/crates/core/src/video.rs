//! Pixel-space frames and clips, and the latent-space video wrapper.
//!
//! Frames are planar RGB (`[channel][row][col]`) `f32` in nominal range `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == CHANNELS * height * width,
            Contract,
            "frame buffer has {} values, expected {}x{}x{}",
            data.len(),
            CHANNELS,
            height,
            width
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Frame> {
        ensure!(
            top + height <= self.height && left + width <= self.width,
            Contract,
            "crop {height}x{width}@({top},{left}) exceeds {}x{}",
            self.height,
            self.width
        );
        Ok(Frame::from_fn(height, width, |c, y, x| self.at(c, top + y, left + x)))
    }

    /// Bicubic resampling (Keys kernel, a = -0.5) with edge replication.
    pub fn resize_bicubic(&self, height: usize, width: usize) -> Frame {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let rows = cubic_taps(self.height, height);
        let cols = cubic_taps(self.width, width);
        // Horizontal pass into a (C, src_h, dst_w) buffer, then vertical.
        let mut tmp = vec![0.0f64; CHANNELS * self.height * width];
        for c in 0..CHANNELS {
            for y in 0..self.height {
                let src = &self.data[(c * self.height + y) * self.width..][..self.width];
                for (x, taps) in cols.iter().enumerate() {
                    tmp[(c * self.height + y) * width + x] =
                        taps.iter().map(|&(i, w)| w * f64::from(src[i])).sum();
                }
            }
        }
        let mut data = vec![0.0f32; CHANNELS * height * width];
        for c in 0..CHANNELS {
            for (y, taps) in rows.iter().enumerate() {
                for x in 0..width {
                    let v: f64 = taps
                        .iter()
                        .map(|&(i, w)| w * tmp[(c * self.height + i) * width + x])
                        .sum();
                    data[(c * height + y) * width + x] = v as f32;
                }
            }
        }
        Frame {
            height,
            width,
            data,
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, CHANNELS, self.height, self.width), device)?
            .to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Frame> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Contract(format!("frame tensor must be rank 3 or 4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        ensure!(c == CHANNELS, Contract, "frame tensor has {c} channels");
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Frame::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize_u8(self.at(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Frame {
        let (w, h) = img.dimensions();
        Frame::from_fn(h as usize, w as usize, |c, y, x| {
            f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        })
    }

    /// Decode an 8-bit image (any format the codec recognizes, converted to RGB).
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Frame> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Frame::from_rgb8(&img.to_rgb8()))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn quantized(&self) -> Frame {
        self.map(|v| f32::from(quantize_u8(v)) / 255.0)
    }
}

fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per output sample: source indices and normalized weights.
fn cubic_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    // Widen the kernel when minifying so that it low-passes.
    let support = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - 2.0 * support).floor() as isize;
            let hi = (center + 2.0 * support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = keys((i as f64 - center) / support);
                if w != 0.0 {
                    let idx = i.clamp(0, src as isize - 1) as usize;
                    taps.push((idx, w));
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

fn keys(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// A fixed-size sequence of equally sized RGB frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        ensure!(!frames.is_empty(), Contract, "clip has no frames");
        let dims = frames[0].dims();
        ensure!(
            frames.iter().all(|f| f.dims() == dims),
            Contract,
            "clip frames differ in size"
        );
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn first(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn last(&self) -> &Frame {
        &self.frames[self.frames.len() - 1]
    }

    pub fn reversed(&self) -> VideoClip {
        VideoClip {
            frames: self.frames.iter().rev().cloned().collect(),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<VideoClip> {
        ensure!(
            start + len <= self.len() && len > 0,
            Contract,
            "slice [{start}, {}) outside clip of {} frames",
            start + len,
            self.len()
        );
        VideoClip::new(self.frames[start..start + len].to_vec())
    }

    pub fn map_frames(&self, f: impl Fn(&Frame) -> Frame) -> VideoClip {
        VideoClip {
            frames: self.frames.iter().map(f).collect(),
        }
    }

    pub fn resize_bicubic(&self, height: usize, width: usize) -> VideoClip {
        self.map_frames(|f| f.resize_bicubic(height, width))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<VideoClip> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.crop(top, left, height, width))
            .collect::<Result<Vec<_>>>()?;
        VideoClip::new(frames)
    }

    /// `(k, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(self.len() * CHANNELS * h * w);
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Ok(Tensor::from_vec(data, (self.len(), CHANNELS, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<VideoClip> {
        let (k, c, _, _) = t.dims4()?;
        ensure!(c == CHANNELS, Contract, "clip tensor has {c} channels");
        let frames = (0..k)
            .map(|i| Frame::from_tensor(&t.narrow(0, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        VideoClip::new(frames)
    }

    pub fn quantized(&self) -> VideoClip {
        self.map_frames(Frame::quantized)
    }

    /// Writes `000001.png`, `000002.png`, ... into `dir` (created if missing).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            let path = dir.join(frame_file_name(i));
            let bytes = f.to_png_bytes()?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads every `*.png` in `dir`, ordered by file name.
    pub fn read_dir(dir: &Path) -> Result<VideoClip> {
        let paths = png_files(dir)?;
        ensure!(!paths.is_empty(), Contract, "{} holds no PNG frames", dir.display());
        let frames = paths
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Frame::from_png_bytes(&bytes)
            })
            .collect::<Result<Vec<_>>>()?;
        VideoClip::new(frames)
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{:06}.png", index + 1)
}

pub fn png_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Per-frame latent video, stored as a `(frames, channels, h, w)` tensor.
#[derive(Debug, Clone)]
pub struct LatentVideo(pub Tensor);

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        ensure!(t.rank() == 4, Contract, "latent video must be rank 4, got {:?}", t.dims());
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }

    pub fn reversed(&self) -> Result<LatentVideo> {
        Ok(LatentVideo(reverse_frames_tensor(&self.0, self.frames())?))
    }
}

/// Flip the leading axis within each group of `clip_len` entries.
///
/// The leading axis is laid out as `batch * clip_len`; a plain clip uses `clip_len == len`.
pub fn reverse_frames_tensor(t: &Tensor, clip_len: usize) -> Result<Tensor> {
    let n = t.dims()[0];
    ensure!(
        clip_len > 0 && n % clip_len == 0,
        Contract,
        "leading axis {n} is not a multiple of clip length {clip_len}"
    );
    if clip_len == 1 {
        return Ok(t.clone());
    }
    let idx: Vec<u32> = (0..n)
        .map(|i| {
            let (b, f) = (i / clip_len, i % clip_len);
            (b * clip_len + clip_len - 1 - f) as u32
        })
        .collect();
    let idx = Tensor::from_vec(idx, n, t.device())?;
    Ok(t.index_select(&idx, 0)?)
}
