//! The on-disk container: magic, version, `key=value` metadata, a tensor
//! directory, then raw little-endian `f32` payloads.

use std::collections::BTreeMap;

use crate::error::LoadError;
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"LDAC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: ParamStore<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, &format!("{k}={v}"));
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in self.tensors.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(LoadError::BadMagic { found });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(LoadError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let line = r.string("metadata line")?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LoadError::Malformed(format!("metadata line without '=': {line:?}")))?;
            if metadata.insert(k.to_string(), v.to_string()).is_some() {
                return Err(LoadError::Malformed(format!("duplicate metadata key {k:?}")));
            }
        }
        let count = r.u32("tensor count")?;
        let mut directory = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "tensor dims")?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| LoadError::Malformed(format!("dimension {d} of {name}")))?);
            }
            directory.push((name, shape));
        }
        let mut tensors = ParamStore::new();
        for (name, shape) in directory {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| LoadError::Malformed(format!("shape {shape:?} of {name} overflows")))?;
            let raw = r.take(n.saturating_mul(4), &format!("payload of {name}"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| LoadError::Malformed(e.to_string()))?;
            if tensors.contains(&name) {
                return Err(LoadError::Malformed(format!("duplicate tensor {name:?}")));
            }
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(LoadError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LoadError> {
        if self.bytes.len() - self.pos < n {
            return Err(LoadError::Truncated { what: what.to_string() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, LoadError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| LoadError::Malformed(format!("{what} is not UTF-8")))
    }
}
