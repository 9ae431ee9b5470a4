//! Evaluation protocols: weighted kNN over the memory bank, a linear probe
//! trained on frozen embeddings, neighbor-similarity density profiles, and
//! the adjusted Rand index for comparing clusterings.
//!
//! Everything here is read-only over banks and embeddings and deterministic
//! per seed. Labels are used only in this module and in test assertions.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::MemoryBank;
use crate::embedding::{EmbeddingVector, Temperature};
use crate::error::LaError;
use crate::neighbors::top_k_ranked;
use crate::Result;

/// Largest neighbor count the kNN classifier defaults to.
pub const KNN_K_CAP: usize = 200;
/// Largest neighbor rank the density local set defaults to.
pub const LOCAL_RANK_CAP: usize = 30;
/// Largest background-band end the density profile defaults to.
pub const BAND_HIGH_CAP: usize = 4096;

/// Default kNN neighbor count for a bank of `n` rows.
pub fn default_knn_k(n: usize) -> usize {
    (n / 10).clamp(1, KNN_K_CAP)
}

/// Default local-density rank for a bank of `n` rows.
pub fn default_local_rank(n: usize) -> usize {
    (n / 50).clamp(1, LOCAL_RANK_CAP)
}

/// Default background band, scaled down from the reference band so the
/// band stays strictly between the local set and the bank size.
pub fn default_band(n: usize) -> (usize, usize) {
    let high = (n / 3).clamp(2, BAND_HIGH_CAP).min(n.saturating_sub(1));
    let low = (n / 10).clamp(1, high.saturating_sub(1).max(1));
    (low, high)
}

/// Classifies `v` by similarity-weighted vote over its `k` nearest bank
/// rows: weight exp(sim / tau), vote per label, winner by total weight with
/// ties to the smaller label. Returns the label and its weight share.
pub fn knn_classify(
    v: &EmbeddingVector,
    bank: &MemoryBank,
    k: usize,
    tau: Temperature,
) -> Result<(u32, f64)> {
    let labels = bank
        .labels()
        .ok_or_else(|| LaError::Label("kNN classification needs a labeled bank".into()))?;
    let ranked = top_k_ranked(v, bank, k)?;
    // Weights are shifted by the best similarity before exponentiation so a
    // tiny temperature cannot overflow; shares are shift-invariant.
    let best = ranked[0].1;
    let mut votes: Vec<f64> = Vec::new();
    let mut total = 0.0;
    for &(index, sim) in &ranked {
        let label = labels[index] as usize;
        if label >= votes.len() {
            votes.resize(label + 1, 0.0);
        }
        let w = ((sim - best) / tau.value()).exp();
        votes[label] += w;
        total += w;
    }
    let mut winner = 0usize;
    for (label, &w) in votes.iter().enumerate() {
        if w > votes[winner] {
            winner = label;
        }
    }
    Ok((winner as u32, votes[winner] / total))
}

/// Fraction of `queries` whose kNN-predicted label matches `truth`.
pub fn knn_accuracy(
    queries: &[EmbeddingVector],
    truth: &[u32],
    bank: &MemoryBank,
    k: usize,
    tau: Temperature,
) -> Result<f64> {
    if queries.is_empty() || queries.len() != truth.len() {
        return Err(LaError::Label(format!(
            "{} queries against {} labels",
            queries.len(),
            truth.len()
        )));
    }
    let predicted: Vec<Result<u32>> = queries
        .par_iter()
        .map(|v| knn_classify(v, bank, k, tau).map(|(label, _)| label))
        .collect();
    let mut correct = 0usize;
    for (p, &t) in predicted.into_iter().zip(truth.iter()) {
        if p? == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

/// Hyperparameters of the linear probe.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 90,
            lr: 0.01,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Trains a softmax linear classifier on frozen embeddings with momentum
/// SGD and weight decay on the weight matrix only, then returns test
/// accuracy. Prediction ties go to the smaller class index.
pub fn linear_probe(
    train_x: &[EmbeddingVector],
    train_y: &[u32],
    test_x: &[EmbeddingVector],
    test_y: &[u32],
    config: &ProbeConfig,
) -> Result<f64> {
    if train_x.is_empty() || train_x.len() != train_y.len() {
        return Err(LaError::Label(format!(
            "{} training embeddings against {} labels",
            train_x.len(),
            train_y.len()
        )));
    }
    if test_x.is_empty() || test_x.len() != test_y.len() {
        return Err(LaError::Label(format!(
            "{} test embeddings against {} labels",
            test_x.len(),
            test_y.len()
        )));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(LaError::Config("probe epochs and batch size must be positive".into()));
    }
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(LaError::Config(format!("probe lr must be positive, got {}", config.lr)));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(LaError::Config(format!(
            "probe momentum must lie in [0, 1), got {}",
            config.momentum
        )));
    }
    if !(config.weight_decay >= 0.0 && config.weight_decay.is_finite()) {
        return Err(LaError::Config(format!(
            "probe weight decay must be nonnegative, got {}",
            config.weight_decay
        )));
    }
    let d = train_x[0].dim();
    for v in train_x.iter().chain(test_x.iter()) {
        if v.dim() != d {
            return Err(LaError::DimensionMismatch(format!(
                "probe embeddings mix dimensions {d} and {}",
                v.dim()
            )));
        }
    }
    let classes = train_y
        .iter()
        .chain(test_y.iter())
        .map(|&y| y as usize + 1)
        .max()
        .expect("labels are nonempty");

    let mut weights = vec![0f64; classes * d];
    let mut biases = vec![0f64; classes];
    let mut vel_w = vec![0f64; classes * d];
    let mut vel_b = vec![0f64; classes];
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let logits_of = |weights: &[f64], biases: &[f64], x: &EmbeddingVector| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &weights[c * d..(c + 1) * d];
                row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + biases[c]
            })
            .collect()
    };

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad_w = vec![0f64; classes * d];
            let mut grad_b = vec![0f64; classes];
            for &i in batch {
                let x = &train_x[i];
                let logits = logits_of(&weights, &biases, x);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..classes {
                    let mut delta = exps[c] / sum;
                    if c == train_y[i] as usize {
                        delta -= 1.0;
                    }
                    grad_b[c] += delta;
                    let row = &mut grad_w[c * d..(c + 1) * d];
                    for (g, &xv) in row.iter_mut().zip(x.iter()) {
                        *g += delta * xv;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for ((v, g), w) in vel_w.iter_mut().zip(&grad_w).zip(&weights) {
                *v = config.momentum * *v + (g * inv + config.weight_decay * w);
            }
            for (v, g) in vel_b.iter_mut().zip(&grad_b) {
                *v = config.momentum * *v + g * inv;
            }
            for (w, v) in weights.iter_mut().zip(&vel_w) {
                *w -= config.lr * v;
            }
            for (b, v) in biases.iter_mut().zip(&vel_b) {
                *b -= config.lr * v;
            }
        }
    }

    let mut correct = 0usize;
    for (x, &y) in test_x.iter().zip(test_y.iter()) {
        let logits = logits_of(&weights, &biases, x);
        let mut best = 0usize;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        if best as u32 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}

/// Per-point neighbor-similarity summary of a bank.
///
/// For each row, neighbors are ranked by descending similarity with the row
/// itself excluded. `local[i]` is the mean similarity over ranks
/// `1..=local_rank`; `background[i]` is the mean over ranks
/// `band.0..=band.1`.
#[derive(Debug, Clone)]
pub struct DensityProfile {
    local: Vec<f64>,
    background: Vec<f64>,
    local_rank: usize,
    band: (usize, usize),
}

/// Bin count of the similarity histograms.
pub const HISTOGRAM_BINS: usize = 64;

impl DensityProfile {
    pub fn local(&self) -> &[f64] {
        &self.local
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn local_rank(&self) -> usize {
        self.local_rank
    }

    pub fn band(&self) -> (usize, usize) {
        self.band
    }

    pub fn mean_local(&self) -> f64 {
        self.local.iter().sum::<f64>() / self.local.len() as f64
    }

    pub fn mean_background(&self) -> f64 {
        self.background.iter().sum::<f64>() / self.background.len() as f64
    }

    /// 64-bin histograms of the local and background values over [-1, 1].
    /// Out-of-range values (possible only through rounding) clamp into the
    /// end bins.
    pub fn histogram(&self) -> (Vec<u64>, Vec<u64>) {
        let bin_of = |x: f64| -> usize {
            let t = (x + 1.0) / 2.0 * HISTOGRAM_BINS as f64;
            (t.floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1) as usize
        };
        let mut local = vec![0u64; HISTOGRAM_BINS];
        let mut background = vec![0u64; HISTOGRAM_BINS];
        for &x in &self.local {
            local[bin_of(x)] += 1;
        }
        for &x in &self.background {
            background[bin_of(x)] += 1;
        }
        (local, background)
    }

    /// CSV with one row per bank index: `index,local_density,background_density`.
    pub fn to_point_csv(&self) -> String {
        let mut out = String::from("index,local_density,background_density\n");
        for (i, (l, b)) in self.local.iter().zip(&self.background).enumerate() {
            writeln!(out, "{i},{l:.6},{b:.6}").expect("string write");
        }
        out
    }

    /// CSV of the two histograms: `bin_left,bin_right,local_count,background_count`.
    pub fn to_histogram_csv(&self) -> String {
        let (local, background) = self.histogram();
        let mut out = String::from("bin_left,bin_right,local_count,background_count\n");
        let width = 2.0 / HISTOGRAM_BINS as f64;
        for bin in 0..HISTOGRAM_BINS {
            let left = -1.0 + bin as f64 * width;
            let right = left + width;
            writeln!(out, "{left:.6},{right:.6},{},{}", local[bin], background[bin])
                .expect("string write");
        }
        out
    }
}

/// Computes the density profile of `bank`: per row, the mean similarity to
/// its `local_rank` nearest other rows and to the rows ranked inside
/// `band` (inclusive, 1-based over other rows).
pub fn density_profile(
    bank: &MemoryBank,
    local_rank: usize,
    band: (usize, usize),
) -> Result<DensityProfile> {
    let n = bank.len();
    let (low, high) = band;
    if n < 3 {
        return Err(LaError::Config(format!(
            "density profile needs at least 3 rows, got {n}"
        )));
    }
    if !(1 <= local_rank && local_rank <= n - 1) {
        return Err(LaError::Config(format!(
            "local rank must satisfy 1 <= r <= {}, got {local_rank}",
            n - 1
        )));
    }
    if !(1 <= low && low < high && high <= n - 1) {
        return Err(LaError::Config(format!(
            "band must satisfy 1 <= low < high <= {}, got ({low}, {high})",
            n - 1
        )));
    }

    let take = (high.max(local_rank) + 1).min(n);
    let rows: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v = EmbeddingVector::normalize(&bank.row_f64(i))?;
            let ranked = top_k_ranked(&v, bank, take)?;
            // Drop the row itself; when rounding keeps it out of the top
            // ranks, drop the weakest entry instead so the neighbor count
            // still covers both the local set and the band.
            let mut others: Vec<f64> = Vec::with_capacity(take - 1);
            let mut seen_self = false;
            for &(index, sim) in &ranked {
                if index == i && !seen_self {
                    seen_self = true;
                    continue;
                }
                others.push(sim);
            }
            if !seen_self {
                others.pop();
            }
            let local: f64 =
                others[..local_rank].iter().sum::<f64>() / local_rank as f64;
            let band_slice = &others[low - 1..high];
            let background: f64 = band_slice.iter().sum::<f64>() / band_slice.len() as f64;
            Ok((local, background))
        })
        .collect();

    let mut local = Vec::with_capacity(n);
    let mut background = Vec::with_capacity(n);
    for row in rows {
        let (l, b) = row?;
        local.push(l);
        background.push(b);
    }
    Ok(DensityProfile {
        local,
        background,
        local_rank,
        band,
    })
}

/// Adjusted Rand index between two assignments of the same points.
///
/// 1.0 for identical partitions (up to relabeling), about 0 for independent
/// ones. When the pair-count denominator vanishes (both partitions all
/// singletons or all one cluster) the partitions are identical and the
/// index is 1.0 by convention.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(LaError::Label(format!(
            "adjusted Rand index needs matching nonempty assignments, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let pairs = |m: u64| -> u128 { (m as u128) * (m.saturating_sub(1) as u128) / 2 };

    // BTreeMap keeps the contingency walk deterministic.
    let mut contingency: std::collections::BTreeMap<(u32, u32), u64> =
        std::collections::BTreeMap::new();
    let mut rows: std::collections::BTreeMap<u32, u64> = std::collections::BTreeMap::new();
    let mut cols: std::collections::BTreeMap<u32, u64> = std::collections::BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *contingency.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let index: u128 = contingency.values().map(|&m| pairs(m)).sum();
    let row_sum: u128 = rows.values().map(|&m| pairs(m)).sum();
    let col_sum: u128 = cols.values().map(|&m| pairs(m)).sum();
    let total = pairs(a.len() as u64);
    if total == 0 {
        return Ok(1.0);
    }
    let expected = row_sum as f64 * col_sum as f64 / total as f64;
    let max_index = (row_sum as f64 + col_sum as f64) / 2.0;
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index as f64 - expected) / denom)
}
