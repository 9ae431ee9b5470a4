//! Embedding vectors, index sets, and the non-parametric softmax.
//!
//! Similarity between a query embedding and a bank row is their dot product;
//! because both are unit vectors it equals cosine similarity. Probabilities
//! come from a temperature-scaled softmax over all bank rows, evaluated with
//! max-shifted exponentials so extreme temperatures cannot overflow.

use crate::bank::MemoryBank;
use crate::error::LaError;
use crate::Result;

/// Row-block size for similarity scans over the bank. Bank rows are stored
/// row-major, so scanning block by block keeps traversal cache-friendly and
/// gives top-k selection a natural batch unit.
pub const SIMILARITY_BLOCK: usize = 64;

/// Norm threshold below which a vector cannot be meaningfully normalized.
pub const MIN_NORM: f64 = 1e-12;

/// An L2-normalized embedding with at least two finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Projects `z` onto the unit sphere.
    ///
    /// Errors with `ZeroNorm` when `‖z‖ < 1e-12`, and rejects non-finite
    /// entries or fewer than two dimensions.
    pub fn normalize(z: &[f64]) -> Result<Self> {
        if z.len() < 2 {
            return Err(LaError::DimensionMismatch(format!(
                "embedding needs at least 2 dimensions, got {}",
                z.len()
            )));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(LaError::DimensionMismatch(
                "embedding input has non-finite entries".into(),
            ));
        }
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < MIN_NORM {
            return Err(LaError::ZeroNorm { norm });
        }
        Ok(EmbeddingVector {
            values: z.iter().map(|x| x / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

impl std::ops::Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// Softmax temperature: finite and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(LaError::Config(format!(
                "temperature must be finite and positive, got {tau}"
            )));
        }
        Ok(Temperature(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    /// The temperature used throughout training and evaluation.
    fn default() -> Self {
        Temperature(0.07)
    }
}

/// A sorted, deduplicated set of sample indices.
///
/// Construction validates every index against the owning collection's
/// length; membership is a binary search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    /// Sorts and deduplicates `indices`; errors if any index is >= `n`.
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(LaError::IndexOutOfRange { index: last, len: n });
            }
        }
        Ok(IndexSet { indices })
    }

    pub fn empty() -> Self {
        IndexSet { indices: Vec::new() }
    }

    /// The full set `{0, .., n-1}`.
    pub fn full(n: usize) -> Self {
        IndexSet {
            indices: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    /// Set intersection by merge walk over the two sorted lists.
    pub fn intersect(&self, other: &IndexSet) -> IndexSet {
        let (mut a, mut b) = (0, 0);
        let mut out = Vec::new();
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    out.push(self.indices[a]);
                    a += 1;
                    b += 1;
                }
            }
        }
        IndexSet { indices: out }
    }

    /// Set union by merge walk, preserving sortedness.
    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let (mut a, mut b) = (0, 0);
        let mut out = Vec::with_capacity(self.indices.len() + other.indices.len());
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => {
                    out.push(self.indices[a]);
                    a += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.indices[b]);
                    b += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(self.indices[a]);
                    a += 1;
                    b += 1;
                }
            }
        }
        out.extend_from_slice(&self.indices[a..]);
        out.extend_from_slice(&other.indices[b..]);
        IndexSet { indices: out }
    }

    /// The complement `{0, .., n-1} \ self`; errors if the set has members
    /// at or beyond `n`.
    pub fn complement(&self, n: usize) -> Result<IndexSet> {
        if let Some(&last) = self.indices.last() {
            if last >= n {
                return Err(LaError::IndexOutOfRange { index: last, len: n });
            }
        }
        let mut out = Vec::with_capacity(n - self.indices.len());
        let mut member = self.indices.iter().peekable();
        for i in 0..n {
            if member.peek() == Some(&&i) {
                member.next();
            } else {
                out.push(i);
            }
        }
        Ok(IndexSet { indices: out })
    }
}

pub(crate) fn dot_row(v: &[f64], row: &[f32]) -> f64 {
    debug_assert_eq!(v.len(), row.len());
    v.iter().zip(row.iter()).map(|(a, &b)| a * b as f64).sum()
}

/// Dot product of `v` with every bank row, in row order.
///
/// Rows are visited in blocks of [`SIMILARITY_BLOCK`]; the result is exactly
/// the per-row dot product, so blocking never changes the values.
pub fn similarity_row(v: &EmbeddingVector, bank: &MemoryBank) -> Result<Vec<f64>> {
    if v.dim() != bank.dim() {
        return Err(LaError::DimensionMismatch(format!(
            "query has dimension {}, bank has {}",
            v.dim(),
            bank.dim()
        )));
    }
    let d = bank.dim();
    let flat = bank.rows_flat();
    let mut out = Vec::with_capacity(bank.len());
    for block in flat.chunks(SIMILARITY_BLOCK * d) {
        for row in block.chunks_exact(d) {
            out.push(dot_row(v, row));
        }
    }
    Ok(out)
}

/// Logits `dot(v, row_j) / tau` for every bank row.
pub(crate) fn logits(v: &EmbeddingVector, bank: &MemoryBank, tau: Temperature) -> Result<Vec<f64>> {
    let mut sims = similarity_row(v, bank)?;
    let inv = 1.0 / tau.value();
    for s in &mut sims {
        *s *= inv;
    }
    Ok(sims)
}

/// Max-shifted exponential sum: returns `(max, sum_j exp(x_j - max))`.
pub(crate) fn shifted_exp_sum(xs: &[f64]) -> (f64, f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = xs.iter().map(|x| (x - max).exp()).sum::<f64>();
    (max, sum)
}

/// Probability of instance `i` under the non-parametric softmax:
/// `exp(dot(v, row_i)/tau) / sum_j exp(dot(v, row_j)/tau)`.
pub fn instance_prob(
    i: usize,
    v: &EmbeddingVector,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<f64> {
    if i >= bank.len() {
        return Err(LaError::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    let logits = logits(v, bank, tau)?;
    let (max, sum) = shifted_exp_sum(&logits);
    Ok((logits[i] - max).exp() / sum)
}

/// Probability mass of an index set: `sum_{i in a} instance_prob(i)`.
///
/// Numerator and denominator share one max shift, so the ratio is stable
/// at any temperature. The empty set has probability zero.
pub fn set_prob(
    a: &IndexSet,
    v: &EmbeddingVector,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<f64> {
    if let Some(&last) = a.as_slice().last() {
        if last >= bank.len() {
            return Err(LaError::IndexOutOfRange {
                index: last,
                len: bank.len(),
            });
        }
    }
    let logits = logits(v, bank, tau)?;
    let (max, sum) = shifted_exp_sum(&logits);
    let subset: f64 = a.iter().map(|i| (logits[i] - max).exp()).sum();
    Ok(subset / sum)
}
