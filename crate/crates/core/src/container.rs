//! Tagged binary container shared by model assets, datasets and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8  bytes  b"HFACEBIN"
//! version    u32       currently 1
//! n_chunks   u32
//! chunk*     n_chunks times:
//!     name_len u32, name bytes (UTF-8)
//!     dtype    u8   (0 = f64, 1 = f32, 2 = i64, 3 = u8)
//!     ndim     u32
//!     dims     ndim × u64
//!     payload  product(dims) × dtype size, little-endian
//! ```
//!
//! Writing is fully deterministic: chunks are serialized in insertion order
//! and the format contains no timestamps or platform-dependent fields, so
//! identical contents produce identical bytes. `f64`/`f32` payloads round
//! trip bitwise.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HFACEBIN";
const VERSION: u32 = 1;

/// Payload of one named chunk.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl ChunkData {
    fn dtype_tag(&self) -> u8 {
        match self {
            ChunkData::F64(_) => 0,
            ChunkData::F32(_) => 1,
            ChunkData::I64(_) => 2,
            ChunkData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            ChunkData::F64(v) => v.len(),
            ChunkData::F32(v) => v.len(),
            ChunkData::I64(v) => v.len(),
            ChunkData::U8(v) => v.len(),
        }
    }
}

/// A named, shaped array.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ChunkData,
}

/// An ordered collection of chunks with by-name lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    chunks: Vec<Chunk>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of chunks.
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Appends a chunk, checking that `dims` matches the payload length.
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: ChunkData) -> Result<()> {
        let name = name.into();
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "chunk '{name}': dims {dims:?} imply {expect} elements, payload has {}",
                data.len()
            )));
        }
        if self.chunks.iter().any(|c| c.name == name) {
            return Err(Error::invalid(format!("duplicate chunk name '{name}'")));
        }
        self.chunks.push(Chunk { name, dims, data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.push(name, dims, ChunkData::F64(data))
    }

    pub fn push_f32(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.push(name, dims, ChunkData::F32(data))
    }

    pub fn push_i64(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<i64>) -> Result<()> {
        self.push(name, dims, ChunkData::I64(data))
    }

    pub fn push_u8(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<u8>) -> Result<()> {
        self.push(name, dims, ChunkData::U8(data))
    }

    pub fn get(&self, name: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.name == name)
    }

    fn require(&self, name: &str) -> Result<&Chunk> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("missing chunk '{name}'")))
    }

    /// Fetches an f64 chunk by name; errors if absent or of another dtype.
    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let c = self.require(name)?;
        match &c.data {
            ChunkData::F64(v) => Ok((&c.dims, v)),
            other => Err(Error::format(format!(
                "chunk '{name}': expected f64, found dtype tag {}",
                other.dtype_tag()
            ))),
        }
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let c = self.require(name)?;
        match &c.data {
            ChunkData::F32(v) => Ok((&c.dims, v)),
            other => Err(Error::format(format!(
                "chunk '{name}': expected f32, found dtype tag {}",
                other.dtype_tag()
            ))),
        }
    }

    pub fn get_i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let c = self.require(name)?;
        match &c.data {
            ChunkData::I64(v) => Ok((&c.dims, v)),
            other => Err(Error::format(format!(
                "chunk '{name}': expected i64, found dtype tag {}",
                other.dtype_tag()
            ))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let c = self.require(name)?;
        match &c.data {
            ChunkData::U8(v) => Ok((&c.dims, v)),
            other => Err(Error::format(format!(
                "chunk '{name}': expected u8, found dtype tag {}",
                other.dtype_tag()
            ))),
        }
    }

    /// Convenience: fetches an i64 chunk and converts to `usize`, rejecting
    /// negative entries.
    pub fn get_indices(&self, name: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let (dims, raw) = self.get_i64(name)?;
        let mut out = Vec::with_capacity(raw.len());
        for &v in raw {
            if v < 0 {
                return Err(Error::format(format!("chunk '{name}': negative index {v}")));
            }
            out.push(v as usize);
        }
        Ok((dims.to_vec(), out))
    }

    /// Serializes to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            let name = c.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(c.data.dtype_tag());
            out.extend_from_slice(&(c.dims.len() as u32).to_le_bytes());
            for &d in &c.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &c.data {
                ChunkData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ChunkData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ChunkData::I64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ChunkData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    /// Parses a container from bytes, validating magic, version, chunk
    /// boundaries and payload sizes. Truncated or malformed input yields
    /// `Error::Format`, never a panic.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::format("bad magic: not a container file"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported container version {version}")));
        }
        let n_chunks = cur.u32()? as usize;
        let mut chunks = Vec::new();
        for i in 0..n_chunks {
            let name_len = cur.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::format(format!("chunk {i}: name length {name_len} too large")));
            }
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::format(format!("chunk {i}: name is not UTF-8")))?
                .to_string();
            let dtype = cur.u8()?;
            let ndim = cur.u32()? as usize;
            if ndim > 32 {
                return Err(Error::format(format!("chunk '{name}': ndim {ndim} too large")));
            }
            let mut dims = Vec::with_capacity(ndim);
            let mut count: usize = 1;
            for _ in 0..ndim {
                let d = cur.u64()? as usize;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(format!("chunk '{name}': dim overflow")))?;
                dims.push(d);
            }
            let data = match dtype {
                0 => {
                    let raw = cur.take(count.checked_mul(8).ok_or_else(size_err)?)?;
                    ChunkData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
                }
                1 => {
                    let raw = cur.take(count.checked_mul(4).ok_or_else(size_err)?)?;
                    ChunkData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
                }
                2 => {
                    let raw = cur.take(count.checked_mul(8).ok_or_else(size_err)?)?;
                    ChunkData::I64(raw.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect())
                }
                3 => ChunkData::U8(cur.take(count)?.to_vec()),
                t => return Err(Error::format(format!("chunk '{name}': unknown dtype tag {t}"))),
            };
            chunks.push(Chunk { name, dims, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(format!(
                "trailing bytes after last chunk ({} of {} consumed)",
                cur.pos,
                bytes.len()
            )));
        }
        Ok(Container { chunks })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn size_err() -> Error {
    Error::format("payload size overflow")
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::format("offset overflow"))?;
        if end > self.buf.len() {
            return Err(Error::format(format!(
                "truncated file: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let mut c = Container::new();
        let values = vec![0.0, -1.5, std::f64::consts::PI, f64::MIN_POSITIVE, 1e300, -0.0];
        c.push_f64("weights", vec![2, 3], values.clone()).unwrap();
        c.push_i64("faces", vec![2, 2], vec![0, 1, 2, 3]).unwrap();
        c.push_f32("image", vec![4], vec![0.25, -1.0, 3.5e-8, 1.0]).unwrap();
        c.push_u8("flags", vec![3], vec![0, 1, 255]).unwrap();

        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);

        let (dims, w) = back.get_f64("weights").unwrap();
        assert_eq!(dims, &[2, 3]);
        for (a, b) in w.iter().zip(values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Serialization is deterministic byte-for-byte.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn truncated_input_errors_cleanly() {
        let mut c = Container::new();
        c.push_f64("x", vec![8], (0..8).map(|i| i as f64).collect()).unwrap();
        let bytes = c.to_bytes();
        for cut in [0, 4, 9, 15, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]);
            assert!(err.is_err(), "cut at {cut} should error");
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes_rejected() {
        let mut c = Container::new();
        c.push_u8("x", vec![1], vec![7]).unwrap();
        let mut bytes = c.to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Container::from_bytes(&wrong).is_err());
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn shape_mismatch_rejected_at_push() {
        let mut c = Container::new();
        let err = c.push_f64("x", vec![2, 2], vec![1.0, 2.0, 3.0]);
        assert!(err.is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new();
        c.push_u8("x", vec![1], vec![1]).unwrap();
        assert!(c.push_u8("x", vec![1], vec![2]).is_err());
    }
}
