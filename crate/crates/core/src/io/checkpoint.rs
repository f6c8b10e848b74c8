//! Versioned, checksummed binary container.
//!
//! ```text
//! "HRVQ" | version: u32 | section count: u32
//! per section: tag: [u8; 4] | length: u64 | crc32(tag, length, payload): u32 | payload
//! ```
//!
//! All integers and floats are little-endian. Payloads are built with
//! [`Encoder`] and read back with [`Decoder`].

use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"HRVQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SectionTag(pub [u8; 4]);

impl SectionTag {
    pub const MODEL: SectionTag = SectionTag(*b"MODL");
    pub const CODEBOOK: SectionTag = SectionTag(*b"CODE");
    pub const OPTIMIZER: SectionTag = SectionTag(*b"OPTM");
    pub const PRIOR: SectionTag = SectionTag(*b"PRIR");
    pub const CONFIG: SectionTag = SectionTag(*b"CONF");
    pub const RNG: SectionTag = SectionTag(*b"RNGS");
    pub const COUNTERS: SectionTag = SectionTag(*b"CNTR");

    pub fn name(&self) -> String {
        String::from_utf8_lossy(&self.0).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub tag: SectionTag,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: SectionTag, payload: Vec<u8>) {
        self.sections.push(Section { tag, payload });
    }

    pub fn section(&self, tag: SectionTag) -> Option<&[u8]> {
        self.sections.iter().find(|s| s.tag == tag).map(|s| s.payload.as_slice())
    }

    pub fn require(&self, tag: SectionTag) -> Result<&[u8]> {
        self.section(tag)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {}", tag.name())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag.0);
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&section_crc(s.tag, &s.payload).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        let magic = d.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, not an HRVQ checkpoint")));
        }
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            )));
        }
        let count = d.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let tag = SectionTag(d.take(4)?.try_into().expect("4 bytes"));
            let len = d.u64()? as usize;
            let crc = d.u32()?;
            let payload = d.take(len)?.to_vec();
            if section_crc(tag, &payload) != crc {
                return Err(Error::Checkpoint(format!("CRC mismatch in section {}", tag.name())));
            }
            sections.push(Section { tag, payload });
        }
        if !d.is_done() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last section", d.remaining())));
        }
        Ok(Checkpoint { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn section_crc(tag: SectionTag, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&tag.0);
    h.update(&(payload.len() as u64).to_le_bytes());
    h.update(payload);
    h.finalize()
}

/// Little-endian payload writer.
#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn u32s(&mut self, v: &[u32]) -> &mut Self {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f32s(t.data())
    }

    pub fn params(&mut self, p: &ParamStore) -> &mut Self {
        self.u32(p.len() as u32);
        for (name, t) in p.iter() {
            self.str(name);
            self.tensor(t);
        }
        self
    }
}

/// Bounds-checked little-endian payload reader.
#[derive(Debug)]
pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Decoder { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.remaining()) {
            return Err(Error::Checkpoint(format!("length prefix {n} exceeds payload")));
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_prefix(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len_prefix(4)?;
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len_prefix(4)?;
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor rank {ndim} is implausible")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = self.f32s()?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn params(&mut self) -> Result<ParamStore> {
        let n = self.u32()? as usize;
        let mut names = Vec::with_capacity(n.min(1024));
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            names.push(self.str()?);
            tensors.push(self.tensor()?);
        }
        Ok(ParamStore::from_parts(names, tensors))
    }
}
