//! Externally computed image features and their projection head.
//!
//! File layout (little-endian): magic `DRFE`, `u32` version, `u32` row
//! count, `u32` row width, then `count × dim` `f32` values.

use std::path::Path;

use rand::Rng;

use super::layers::Linear;
use crate::error::{domain, Error, Result};
use crate::nn::{ParamStore, Tape, Tensor, Var};

pub const FEATURE_MAGIC: &[u8; 4] = b"DRFE";
pub const FEATURE_VERSION: u32 = 1;
/// Width of the features this head expects by default.
pub const EXTERNAL_DIM: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalFeatures {
    pub dim: usize,
    pub rows: Vec<f32>,
}

impl ExternalFeatures {
    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn encode_features(f: &ExternalFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * f.rows.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.count() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for v in &f.rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<ExternalFeatures> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let (count, dim) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != count * dim * 4 {
        return Err(Error::Format(format!(
            "feature file holds {} bytes of data, header promises {count}x{dim} floats",
            body.len()
        )));
    }
    let rows = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ExternalFeatures { dim, rows })
}

pub fn read_features(path: &Path) -> Result<ExternalFeatures> {
    decode_features(&std::fs::read(path)?)
}

pub fn write_features(f: &ExternalFeatures, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(f))?;
    Ok(())
}

/// Linear projection of external features to the embedding width, L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalHead {
    pub proj: Linear,
    pub in_dim: usize,
}

impl ExternalHead {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(ps, name, in_dim, dim, rng),
            in_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, features: &[f32]) -> Result<Var> {
        if features.len() != self.in_dim {
            return Err(domain(format!(
                "external feature has width {}, head expects {}",
                features.len(),
                self.in_dim
            )));
        }
        let x = t.constant(Tensor::matrix(1, self.in_dim, features.iter().map(|v| *v as f64).collect()));
        let h = self.proj.forward(t, x);
        Ok(t.l2_normalize_rows(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn feature_file_round_trip_and_errors() {
        let f = ExternalFeatures {
            dim: 3,
            rows: vec![1.0, 2.0, 3.0, -0.5, 0.25, 8.0],
        };
        let bytes = encode_features(&f);
        assert_eq!(decode_features(&bytes).unwrap(), f);
        assert!(matches!(decode_features(&bytes[..20]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_features(&bad), Err(Error::Version { found: 9, .. })));
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn head_projects_to_unit_norm() {
        let mut ps = ParamStore::new();
        let head = ExternalHead::new(&mut ps, "ext", EXTERNAL_DIM, 16, &mut stream(0, &[]));
        let feat: Vec<f32> = (0..EXTERNAL_DIM).map(|i| (i % 7) as f32).collect();
        let mut t = Tape::new(&ps);
        let g = head.forward(&mut t, &feat).unwrap();
        let n: f64 = t.value(g).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(head.forward(&mut t, &feat[..10]).is_err());
    }
}
