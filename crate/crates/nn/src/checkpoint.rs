//! Binary checkpoint format.
//!
//! ```text
//! "MCAF" | u32 version | u32 header_len | header (UTF-8 JSON)
//! u32 count | count x { u32 name_len | name | u32 rank | rank x u32 extent | f64 values }
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::module::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCAF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form architecture description, JSON by convention.
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a module's parameters followed by its buffers.
    pub fn from_module(header: String, module: &mut dyn Module) -> Self {
        let mut tensors: Vec<(String, Tensor)> = module
            .named_params()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.clear_grad();
                (n, t)
            })
            .collect();
        tensors.extend(module.named_buffers().into_iter().map(|(n, t)| (n, t.clone())));
        Self { header, tensors }
    }

    /// Copies every stored tensor into the module slot of the same name.
    pub fn load_into(&self, module: &mut dyn Module) -> Result<()> {
        let expected = module.named_params().len() + module.named_buffers().len();
        if expected != self.tensors.len() {
            return Err(NnError::Usage(format!(
                "checkpoint has {} tensors, module expects {expected}",
                self.tensors.len()
            )));
        }
        self.fill(module.named_params())?;
        self.fill(module.named_buffers())
    }

    fn fill(&self, slots: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, slot) in slots {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| NnError::Usage(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(NnError::Shape(format!(
                    "{name}: checkpoint {:?} vs module {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let hpos = r.pos;
        let header = String::from_utf8(r.take(hlen)?.to_vec())
            .map_err(|_| r.error(hpos, "header is not UTF-8"))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let npos = r.pos;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| r.error(npos, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let spos = r.pos;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && shape.iter().all(|&d| d > 0))
                .ok_or_else(|| r.error(spos, "invalid tensor extents"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.error(spos, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after last record"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, reason: &str) -> NnError {
        NnError::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, &format!("truncated: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
