//! Dense 2-D motion fields and their file format.
//!
//! A flow file is a 16-byte header (8-byte magic `BVSRFLOW`, `u32` height,
//! `u32` width, little-endian) followed by `height * width` interleaved
//! `(u, v)` pairs of little-endian `f32`, row-major. `u` is horizontal motion
//! in pixels (positive right), `v` vertical (positive down).

use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 8] = b"BVSRFLOW";
const HEADER: usize = 16;

/// Motion of frame `t+1` relative to frame `t`: the content at pixel `x` of
/// frame `t+1` was at `x - flow(x)` in frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Interleaved `(u, v)`, row-major.
    data: Vec<f32>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "flow file",
        detail: detail.into(),
    }
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == height * width * 2,
            Contract,
            "flow {height}x{width} needs {} values, got {}",
            height * width * 2,
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                data.push(u);
                data.push(v);
            }
        }
        Self { height, width, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let width = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("dimensions overflow"))?;
        let body = &bytes[HEADER..];
        if body.len() != expected {
            return Err(bad(format!(
                "{height}x{width} needs {expected} payload bytes, found {}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { height, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// File name of the flow between frames `index` and `index + 1` (0-based).
pub fn flow_file_name(index: usize) -> String {
    format!("{:06}.flow", index + 1)
}

pub fn write_flow_dir(dir: &Path, flows: &[FlowField]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in flows.iter().enumerate() {
        f.write(&dir.join(flow_file_name(i)))?;
    }
    Ok(())
}

/// Every `*.flow` file in `dir`, in name order.
pub fn read_flow_dir(dir: &Path) -> Result<Vec<FlowField>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "flow"))
        .collect();
    paths.sort();
    paths.iter().map(|p| FlowField::read(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip() {
        let f = FlowField::from_fn(3, 5, |y, x| (x as f32 - 1.5, -(y as f32) * 0.25));
        let bytes = f.encode();
        assert_eq!(bytes.len(), 16 + 3 * 5 * 8);
        assert_eq!(FlowField::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rejects_bad_payload_length() {
        let mut bytes = FlowField::constant(2, 2, 1.0, 0.0).encode();
        bytes.pop();
        assert!(FlowField::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(data in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = FlowField::decode(&data);
            let mut prefixed = MAGIC.to_vec();
            prefixed.extend_from_slice(&data);
            let _ = FlowField::decode(&prefixed);
        }
    }
}
