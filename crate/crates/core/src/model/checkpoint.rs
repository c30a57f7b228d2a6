//! Versioned binary container for named parameter groups.
//!
//! ```text
//! "MDC1" | version u32 | header_len u32 | header (UTF-8 JSON)
//! group_count u32
//! per group:  name_len u32 | name | tensor_count u32
//!   per tensor: name_len u32 | name | dtype u32 | ndim u32 | dims u32[ndim] | values (LE)
//! ```
//!
//! Values are stored in the writer's precision (dtype 0 = f32, 1 = f64) and
//! converted on load.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::nn::ParamSet;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MDC1";
const VERSION: u32 = 1;

/// A JSON header plus ordered parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle<T> {
    pub header: serde_json::Value,
    pub groups: Vec<(String, ParamSet<T>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Container("invalid UTF-8 name".into()))
    }
}

impl<T: Scalar> TensorBundle<T> {
    pub fn group(&self, name: &str) -> Option<&ParamSet<T>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn require(&self, name: &str) -> Result<&ParamSet<T>> {
        self.group(name).ok_or_else(|| Error::Container(format!("missing parameter group '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        let header = serde_json::to_string(&self.header)?;
        put_str(&mut out, &header);
        put_u32(&mut out, self.groups.len());
        for (gname, ps) in &self.groups {
            put_str(&mut out, gname);
            put_u32(&mut out, ps.len());
            for (name, t) in ps.iter() {
                put_str(&mut out, name);
                put_u32(&mut out, T::DTYPE.tag() as usize);
                put_u32(&mut out, t.shape().len());
                for &d in t.shape() {
                    put_u32(&mut out, d);
                }
                for &v in t.data() {
                    v.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        ensure!(r.take(4).ok() == Some(MAGIC.as_slice()), Error::Container("not a checkpoint (bad magic)".into()));
        let version = r.u32()?;
        ensure!(version == VERSION as usize, Error::Container(format!("unsupported version {version}")));
        let header: serde_json::Value = serde_json::from_str(&r.string()?)?;
        let ngroups = r.u32()?;
        let mut groups = Vec::new();
        for _ in 0..ngroups {
            let gname = r.string()?;
            let count = r.u32()?;
            let mut ps = ParamSet::new();
            for _ in 0..count {
                let name = r.string()?;
                let tag = r.u32()? as u32;
                let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::Container(format!("unknown dtype {tag}")))?;
                let ndim = r.u32()?;
                ensure!(ndim <= 8, Error::Container(format!("tensor {name} has rank {ndim}")));
                let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let n = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| Error::Container(format!("tensor {name} too large")))?;
                let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::Container("overflow".into()))?)?;
                let data: Vec<T> = match dtype {
                    Dtype::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                    Dtype::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
                };
                ps.push(name, Tensor::new(&shape, data)?);
            }
            groups.push((gname, ps));
        }
        ensure!(r.at == bytes.len(), Error::Container("trailing bytes after last group".into()));
        Ok(TensorBundle { header, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
