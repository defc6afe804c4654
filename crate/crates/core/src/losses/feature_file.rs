//! Precomputed feature stacks in the `CBFE` binary format.
//!
//! Layout, little-endian: `b"CBFE"`, `u32` version, `u32` layer count, one
//! `(C, H, W)` `u32` triple per layer, then `f32` values. Values are grouped
//! per image, each image storing its layers in order; the image count is the
//! value count divided by the per-image size.

use std::path::Path;

use thiserror::Error;

use crate::image_io::atomic_write;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CBFE";
pub const FEATURE_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("bad feature file magic")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("feature file truncated: {0}")]
    Truncated(String),
    #[error("invalid feature file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, FeatureFileError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    layer_shapes: Vec<[usize; 3]>,
    /// One flat record per image, `sum(C*H*W)` values long.
    records: Vec<Vec<f32>>,
}

impl FeatureFile {
    pub fn new(layer_shapes: Vec<[usize; 3]>) -> Result<Self> {
        if layer_shapes.is_empty() || layer_shapes.iter().flatten().any(|&d| d == 0) {
            return Err(FeatureFileError::Invalid(format!("layer shapes {layer_shapes:?}")));
        }
        Ok(Self { layer_shapes, records: Vec::new() })
    }

    pub fn layer_shapes(&self) -> &[[usize; 3]] {
        &self.layer_shapes
    }

    pub fn record_len(&self) -> usize {
        self.layer_shapes.iter().map(|s| s[0] * s[1] * s[2]).sum()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends one image given as `[1, C, H, W]` tensors, one per layer.
    pub fn push(&mut self, layers: &[Tensor<f64>]) -> Result<()> {
        if layers.len() != self.layer_shapes.len() {
            return Err(FeatureFileError::Invalid(format!(
                "{} layers given, file has {}",
                layers.len(),
                self.layer_shapes.len()
            )));
        }
        let mut record = Vec::with_capacity(self.record_len());
        for (t, s) in layers.iter().zip(&self.layer_shapes) {
            if t.shape() != [1, s[0], s[1], s[2]] {
                return Err(FeatureFileError::Invalid(format!("layer shape {:?}, expected {s:?}", t.shape())));
            }
            record.extend(t.data().iter().map(|&v| v as f32));
        }
        self.records.push(record);
        Ok(())
    }

    /// The layers of image `index` as `[1, C, H, W]` tensors.
    pub fn image(&self, index: usize) -> Vec<Tensor<f64>> {
        let mut offset = 0;
        let record = &self.records[index];
        self.layer_shapes
            .iter()
            .map(|s| {
                let n = s[0] * s[1] * s[2];
                let vals = record[offset..offset + n].iter().map(|&v| v as f64).collect();
                offset += n;
                Tensor::new(vec![1, s[0], s[1], s[2]], vals).expect("finite stored features")
            })
            .collect()
    }

    /// Spatial mean of the last layer of image `index`.
    pub fn pooled_last(&self, index: usize) -> Vec<f64> {
        let [c, h, w] = *self.layer_shapes.last().expect("nonempty");
        let record = &self.records[index];
        let start = record.len() - c * h * w;
        (0..c)
            .map(|ch| {
                let plane = &record[start + ch * h * w..start + (ch + 1) * h * w];
                plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 12 * self.layer_shapes.len() + 4 * self.len() * self.record_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FEATURE_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_shapes.len() as u32).to_le_bytes());
        for s in &self.layer_shapes {
            for d in s {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for r in &self.records {
            for v in r {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| FeatureFileError::Truncated(format!("header ends at byte {}", bytes.len())))
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FeatureFileError::BadMagic);
        }
        let version = word(4)?;
        if version != FEATURE_FILE_VERSION {
            return Err(FeatureFileError::UnsupportedVersion(version));
        }
        let layers = word(8)? as usize;
        let mut shapes = Vec::with_capacity(layers.min(1024));
        for l in 0..layers {
            let base = 12 + 12 * l;
            shapes.push([word(base)? as usize, word(base + 4)? as usize, word(base + 8)? as usize]);
        }
        let mut file = Self::new(shapes)?;
        let body = &bytes[12 + 12 * layers..];
        let rec_bytes = 4 * file.record_len();
        if !body.len().is_multiple_of(rec_bytes) {
            return Err(FeatureFileError::Truncated(format!(
                "{} value bytes is not a whole number of {rec_bytes}-byte records",
                body.len()
            )));
        }
        for chunk in body.chunks_exact(rec_bytes) {
            let rec: Vec<f32> =
                chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            if rec.iter().any(|v| !v.is_finite()) {
                return Err(FeatureFileError::Invalid("non-finite feature value".into()));
            }
            file.records.push(rec);
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(atomic_write(path, &self.to_bytes())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureFile {
        let mut f = FeatureFile::new(vec![[2, 1, 2], [1, 1, 1]]).unwrap();
        for k in 0..3 {
            let a = Tensor::new(vec![1, 2, 1, 2], vec![k as f64, 1.0, 2.0, 3.5]).unwrap();
            let b = Tensor::new(vec![1, 1, 1, 1], vec![-0.25 * k as f64]).unwrap();
            f.push(&[a, b]).unwrap();
        }
        f
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let back = FeatureFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.len(), 3);
        assert_eq!(back.image(2)[0].data(), &[2.0, 1.0, 2.0, 3.5]);
        assert_eq!(back.pooled_last(1), vec![-0.25]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(FeatureFile::from_bytes(&bytes[..bytes.len() - 2]), Err(FeatureFileError::Truncated(_))));
        bytes[4] = 9;
        assert!(matches!(FeatureFile::from_bytes(&bytes), Err(FeatureFileError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(FeatureFile::from_bytes(&bytes), Err(FeatureFileError::BadMagic)));
    }
}
