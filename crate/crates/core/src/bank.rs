//! The memory bank: one running embedding per training sample.
//!
//! Rows are stored row-major as f32 (matching the on-disk layout exactly, so
//! save/load round-trips are bit-identical) and lifted to f64 for arithmetic.
//! Rows update by convex mixing with a fresh feature followed by
//! renormalization; everything else reads the bank as a snapshot.
//!
//! Labels ride along for evaluation only. They are exposed through a single
//! accessor that training code never calls, keeping the unsupervised claim
//! auditable at the call-site level.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{EmbeddingVector, MIN_NORM};
use crate::error::LaError;
use crate::io::{ArtifactReader, ArtifactWriter};
use crate::Result;

const BANK_MAGIC: &[u8; 4] = b"LABK";
const BANK_VERSION: u32 = 1;

/// N unit-norm embedding rows of dimension D, with optional labels.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    n: usize,
    d: usize,
    rows: Vec<f32>,
    labels: Option<Vec<u32>>,
    degenerate_skips: u64,
}

impl MemoryBank {
    /// A bank of `n` directions drawn uniformly on the unit sphere:
    /// i.i.d. Gaussian coordinates, then normalization.
    pub fn init_random(n: usize, d: usize, seed: u64) -> Result<Self> {
        Self::check_shape(n, d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let mut rows = Vec::with_capacity(n * d);
        let mut buf = vec![0f64; d];
        for _ in 0..n {
            // A d-dimensional Gaussian is never this close to the origin in
            // practice; resample on the (measure-zero) degenerate draw.
            loop {
                for x in buf.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
                if let Ok(v) = EmbeddingVector::normalize(&buf) {
                    rows.extend(v.iter().map(|&x| x as f32));
                    break;
                }
            }
        }
        Ok(MemoryBank {
            n,
            d,
            rows,
            labels: None,
            degenerate_skips: 0,
        })
    }

    /// Builds a bank from already-normalized vectors of equal dimension.
    pub fn from_vectors(vectors: &[EmbeddingVector], labels: Option<Vec<u32>>) -> Result<Self> {
        let n = vectors.len();
        if n == 0 {
            return Err(LaError::Config("bank needs at least one row".into()));
        }
        let d = vectors[0].dim();
        Self::check_shape(n, d)?;
        let mut rows = Vec::with_capacity(n * d);
        for v in vectors {
            if v.dim() != d {
                return Err(LaError::DimensionMismatch(format!(
                    "bank rows must share one dimension, saw {} and {}",
                    d,
                    v.dim()
                )));
            }
            rows.extend(v.iter().map(|&x| x as f32));
        }
        let mut bank = MemoryBank {
            n,
            d,
            rows,
            labels: None,
            degenerate_skips: 0,
        };
        if let Some(labels) = labels {
            bank.set_labels(labels)?;
        }
        Ok(bank)
    }

    fn check_shape(n: usize, d: usize) -> Result<()> {
        if n == 0 {
            return Err(LaError::Config("bank needs at least one row".into()));
        }
        if d < 2 {
            return Err(LaError::Config(format!(
                "bank dimension must be at least 2, got {d}"
            )));
        }
        if n > u32::MAX as usize || d > u32::MAX as usize {
            return Err(LaError::Config("bank shape exceeds u32 range".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// Row `i` lifted to f64, for callers that need a query embedding.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }

    pub(crate) fn rows_flat(&self) -> &[f32] {
        &self.rows
    }

    /// Evaluation-only label access. Training code must not call this.
    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Attaches one label per row.
    pub fn set_labels(&mut self, labels: Vec<u32>) -> Result<()> {
        if labels.len() != self.n {
            return Err(LaError::Label(format!(
                "{} labels for {} rows",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// How many row updates were skipped because mixing produced a
    /// near-zero vector.
    pub fn degenerate_skips(&self) -> u64 {
        self.degenerate_skips
    }

    /// Mixes fresh features into the selected rows:
    /// `row <- normalize((1 - t) * row + t * feature)`.
    ///
    /// `indices` and `features` pair up positionally, so `features[p]`
    /// belongs to row `indices[p]` (with `IndexSet` order, ascending).
    /// A mix that lands within 1e-12 of the origin leaves that row
    /// unchanged and bumps the degenerate-skip counter. Returns the number
    /// of rows actually rewritten.
    pub fn update_rows(
        &mut self,
        indices: &crate::embedding::IndexSet,
        features: &[EmbeddingVector],
        t: f64,
    ) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(LaError::Config(format!(
                "mixing rate must lie in [0, 1], got {t}"
            )));
        }
        if indices.len() != features.len() {
            return Err(LaError::DimensionMismatch(format!(
                "{} indices paired with {} features",
                indices.len(),
                features.len()
            )));
        }
        if let Some(&last) = indices.as_slice().last() {
            if last >= self.n {
                return Err(LaError::IndexOutOfRange {
                    index: last,
                    len: self.n,
                });
            }
        }
        let mut applied = 0;
        let mut mixed = vec![0f64; self.d];
        for (idx, feature) in indices.iter().zip(features.iter()) {
            if feature.dim() != self.d {
                return Err(LaError::DimensionMismatch(format!(
                    "feature has dimension {}, bank has {}",
                    feature.dim(),
                    self.d
                )));
            }
            let row = &self.rows[idx * self.d..(idx + 1) * self.d];
            for ((m, &old), &new) in mixed.iter_mut().zip(row.iter()).zip(feature.iter()) {
                *m = (1.0 - t) * old as f64 + t * new;
            }
            let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < MIN_NORM {
                self.degenerate_skips += 1;
                continue;
            }
            let dst = &mut self.rows[idx * self.d..(idx + 1) * self.d];
            for (slot, m) in dst.iter_mut().zip(mixed.iter()) {
                *slot = (m / norm) as f32;
            }
            applied += 1;
        }
        Ok(applied)
    }

    /// Writes the bank: magic `LABK`, version, N, D, label flag, rows as
    /// little-endian f32 row-major, then labels as u32 when present.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArtifactWriter::create(path, BANK_MAGIC, BANK_VERSION)?;
        w.write_u32(self.n as u32)?;
        w.write_u32(self.d as u32)?;
        w.write_u8(self.labels.is_some() as u8)?;
        w.write_f32_slice(&self.rows)?;
        if let Some(labels) = &self.labels {
            w.write_u32_slice(labels)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ArtifactReader::open(path, BANK_MAGIC, BANK_VERSION)?;
        let n = r.read_u32()? as usize;
        let d = r.read_u32()? as usize;
        let has_labels = match r.read_u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(LaError::format(
                    r.path(),
                    format!("label flag must be 0 or 1, got {other}"),
                ))
            }
        };
        Self::check_shape(n, d).map_err(|e| LaError::format(r.path(), e.to_string()))?;
        let rows = r.read_f32_vec(n * d)?;
        let labels = if has_labels {
            Some(r.read_u32_vec(n)?)
        } else {
            None
        };
        r.expect_eof()?;
        Ok(MemoryBank {
            n,
            d,
            rows,
            labels,
            degenerate_skips: 0,
        })
    }
}
