//! Single-file container: a JSON manifest plus named `f32`/`f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "BVSRCKP1"
//! manifest     u64 length, then UTF-8 JSON
//! count        u64
//! per tensor, in strictly ascending name order:
//!   name       u32 length, then UTF-8
//!   dtype      u8 (0 = f32, 1 = f64)
//!   rank       u8 (<= 8)
//!   dims       rank x u64
//!   data       product(dims) elements
//! ```
//!
//! Nothing may follow the last tensor. Encoding is canonical, so
//! `encode(decode(encode(x))) == encode(x)` byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BVSRCKP1";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => ArrayData::F64(flat.to_vec1::<f64>()?),
            _ => ArrayData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Ok(Self {
            dims: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(match &self.data {
            ArrayData::F32(v) => Tensor::from_slice(v, self.dims.as_slice(), device)?,
            ArrayData::F64(v) => Tensor::from_slice(v, self.dims.as_slice(), device)?,
        })
    }

    fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub manifest: String,
    pub arrays: BTreeMap<String, NamedArray>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, arr) in &self.arrays {
            if name.len() > MAX_NAME || arr.dims.len() > MAX_RANK {
                return Err(bad(format!("array `{name}` exceeds format limits")));
            }
            if arr.dims.iter().product::<usize>() != arr.len() {
                return Err(bad(format!("array `{name}` dims disagree with its data")));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match arr.data {
                ArrayData::F32(_) => 0,
                ArrayData::F64(_) => 1,
            });
            out.push(arr.dims.len() as u8);
            for d in &arr.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &arr.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mlen = r.len_u64()?;
        let manifest = std::str::from_utf8(r.take(mlen)?)
            .map_err(|_| bad("manifest is not UTF-8"))?
            .to_string();
        let count = r.u64()?;
        let mut arrays = BTreeMap::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            if nlen > MAX_NAME {
                return Err(bad("array name too long"));
            }
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            if prev.as_ref().is_some_and(|p| p.as_str() >= name.as_str()) {
                return Err(bad(format!("array `{name}` out of order or duplicated")));
            }
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(bad(format!("rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = r.len_u64()?;
                count = count.checked_mul(d).ok_or_else(|| bad("element count overflows"))?;
                dims.push(d);
            }
            let width = match dtype {
                0 => 4,
                1 => 8,
                other => return Err(bad(format!("unknown dtype tag {other}"))),
            };
            let nbytes = count.checked_mul(width).ok_or_else(|| bad("byte count overflows"))?;
            let raw = r.take(nbytes)?;
            let data = if width == 4 {
                ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                        .collect(),
                )
            } else {
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect(),
                )
            };
            prev = Some(name.clone());
            arrays.insert(name, NamedArray { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length does not fit in memory"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "a.weight".to_string(),
            NamedArray {
                dims: vec![2, 3],
                data: ArrayData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]),
            },
        );
        arrays.insert(
            "b".to_string(),
            NamedArray {
                dims: vec![],
                data: ArrayData::F64(vec![std::f64::consts::PI]),
            },
        );
        Container {
            manifest: r#"{"seed":7}"#.to_string(),
            arrays,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let bytes = sample().encode().unwrap();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 4, 8, 15, bytes.len() - 1] {
            assert!(Container::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::decode(&extra).is_err());
    }

    #[test]
    fn rejects_huge_declared_sizes_without_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(0);
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Container::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Container::decode(&data);
            let mut prefixed = MAGIC.to_vec();
            prefixed.extend_from_slice(&data);
            let _ = Container::decode(&prefixed);
        }

        #[test]
        fn valid_containers_round_trip(values in proptest::collection::vec(any::<f32>(), 0..40), manifest in "[ -~]{0,40}") {
            let mut arrays = BTreeMap::new();
            arrays.insert("w".to_string(), NamedArray { dims: vec![values.len()], data: ArrayData::F32(values) });
            let c = Container { manifest, arrays };
            let bytes = c.encode().unwrap();
            let back = Container::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
        }
    }
}
