//! CBCK checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic `CBCK`, `u32` version, configuration (`u32` base width, stages,
//! input channels, output channels; `f64` BN momentum, BN epsilon), `u32`
//! label count and that many (`u32` length + UTF-8 key, `u32` length + UTF-8
//! value) pairs, `u32` tensor count and per tensor a `u32` rank with `u32`
//! dims, then the values of every tensor as `f32` in layout order.

use std::collections::BTreeMap;
use std::path::Path;

use super::{parameter_specs, Result, UNetConfig, UNetError, UNetWeights};
use crate::image_io::atomic_write;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            UNetError::Truncated(format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.count(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| UNetError::Corrupt(format!("{what} is not UTF-8")))
    }
}

impl UNetWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 4 * self.parameter_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.base_width, c.stages, c.input_channels, c.out_channels] {
            put_u32(&mut out, v);
        }
        out.extend_from_slice(&c.bn_momentum.to_le_bytes());
        out.extend_from_slice(&c.bn_epsilon.to_le_bytes());
        put_u32(&mut out, self.labels.len());
        for (k, v) in &self.labels {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
        }
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole checkpoint; nothing is constructed unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(UNetError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(UNetError::UnsupportedVersion(version));
        }
        let config = UNetConfig {
            base_width: r.count("base width")?,
            stages: r.count("stage count")?,
            input_channels: r.count("input channels")?,
            out_channels: r.count("output channels")?,
            bn_momentum: r.f64("BN momentum")?,
            bn_epsilon: r.f64("BN epsilon")?,
        };
        config.validate().map_err(|e| UNetError::Corrupt(e.to_string()))?;
        let mut labels = BTreeMap::new();
        for _ in 0..r.count("label count")? {
            let k = r.string("label key")?;
            let v = r.string("label value")?;
            labels.insert(k, v);
        }
        let specs = parameter_specs(&config);
        let n = r.count("tensor count")?;
        if n != specs.len() {
            return Err(UNetError::ShapeMismatch(format!(
                "table lists {n} tensors, configuration needs {}",
                specs.len()
            )));
        }
        for s in &specs {
            let rank = r.count("tensor rank")?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.count("tensor dimension")?);
            }
            if shape != s.shape {
                return Err(UNetError::ShapeMismatch(format!("{}: table has {shape:?}, expected {:?}", s.name, s.shape)));
            }
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let numel: usize = s.shape.iter().product();
            let raw = r.take(4 * numel, &s.name)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            tensors.push(Tensor::new(s.shape.clone(), data).map_err(|e| UNetError::Corrupt(format!("{}: {e}", s.name)))?);
        }
        if r.pos != bytes.len() {
            return Err(UNetError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut w = UNetWeights::from_tensors(config, tensors)?;
        w.labels = labels;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()).map_err(|source| UNetError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| UNetError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}
