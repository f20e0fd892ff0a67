//! Versioned binary container shared by every checkpoint kind.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "PCOORDCK"
//! version    u32       FORMAT_VERSION
//! kind       str       e.g. "codec", "generator", "extractor"
//! n_meta     u32
//!   key      str
//!   value    str
//! n_tensors  u32
//!   name     str
//!   rows     u64
//!   cols     u64
//!   data     rows*cols f64 (row-major)
//! checksum   u64       FNV-1a over every preceding byte
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes. Readers reject a
//! newer version, a wrong magic, or a checksum mismatch. Metadata carries the
//! full configuration echo as `key = value` pairs; parameter tensors are named
//! `param/<name>`, optimizer moments `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use partcoord_tape::{AdamW, AdamWConfig, Matrix, ParamStore};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PCOORDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container { kind: kind.into(), meta: Vec::new(), tensors: Vec::new() }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require_meta(key)?;
        v.parse().map_err(|_| Error::Checkpoint(format!("bad metadata value {key} = {v:?}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensor(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 8 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint container (bad magic)".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is newer than supported {FORMAT_VERSION}"
            )));
        }
        let kind = r.string()?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.push((k, v));
        }
        let n_t = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_t);
        for _ in 0..n_t {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let bytes = r.take(
                rows.checked_mul(cols)
                    .and_then(|n| n.checked_mul(8))
                    .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?,
            )?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Container { kind, meta, tensors })
    }

    /// Content identifier: the serialized checksum as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let bytes = self.to_bytes();
        let tail: [u8; 8] = bytes[bytes.len() - 8..].try_into().expect("checksum is 8 bytes");
        format!("{:016x}", u64::from_le_bytes(tail))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn push_params(&mut self, store: &ParamStore) {
        for (_, name, m) in store.iter() {
            self.push_tensor(format!("param/{name}"), m.clone());
        }
    }

    /// Overwrites every parameter of `store` from `param/<name>` tensors, checking shapes.
    pub fn load_params_into(&self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self.require_tensor(&format!("param/{name}"))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn push_optimizer(&mut self, store: &ParamStore, opt: &AdamW) {
        let c = opt.config;
        self.push_meta("adam.step", opt.steps_taken());
        self.push_meta("adam.beta1", c.beta1);
        self.push_meta("adam.beta2", c.beta2);
        self.push_meta("adam.eps", c.eps);
        self.push_meta("adam.weight_decay", c.weight_decay);
        let (m, v) = opt.moments();
        for ((_, name, _), (mm, vv)) in store.iter().zip(m.iter().zip(v)) {
            self.push_tensor(format!("adam.m/{name}"), mm.clone());
            self.push_tensor(format!("adam.v/{name}"), vv.clone());
        }
    }

    pub fn load_optimizer(&self, store: &ParamStore) -> Result<AdamW> {
        let config = AdamWConfig {
            beta1: self.meta_parse("adam.beta1")?,
            beta2: self.meta_parse("adam.beta2")?,
            eps: self.meta_parse("adam.eps")?,
            weight_decay: self.meta_parse("adam.weight_decay")?,
        };
        let step: u64 = self.meta_parse("adam.step")?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, p) in store.iter() {
            let mm = self.require_tensor(&format!("adam.m/{name}"))?;
            let vv = self.require_tensor(&format!("adam.v/{name}"))?;
            if mm.shape() != p.shape() || vv.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
            m.push(mm.clone());
            v.push(vv.clone());
        }
        Ok(AdamW::from_state(config, step, m, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption_detection() {
        let mut c = Container::new("codec");
        c.push_meta("codebook_size", 512);
        c.push_tensor("param/w", Matrix::from_vec(2, 2, vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0]));
        let bytes = c.to_bytes();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn newer_version_rejected() {
        let c = Container::new("x");
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 8);
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let sum = fnv1a(&bytes);
        bytes.extend_from_slice(&sum.to_le_bytes());
        let err = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("newer"), "{err}");
    }
}
