//! The training loop: warm-start on instance discrimination, then the
//! aggregation objective over close and background neighbor sets, with the
//! memory bank trailing the encoder through an exponential moving average.
//!
//! One run is fully determined by the dataset bytes and the config. Every
//! random choice (split, encoder init, bank init, epoch shuffles, cluster
//! seeds) draws from its own stream derived from the config seed, so
//! repeated runs agree bit for bit; only the wall-clock column of the
//! telemetry differs.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::MemoryBank;
use crate::dataset::Dataset;
use crate::embedding::{EmbeddingVector, IndexSet, Temperature};
use crate::encoder::{self, EncoderParams, ParamGrads, Sgd};
use crate::error::LaError;
use crate::eval::{
    self, default_band, default_local_rank, density_profile, knn_classify, ProbeConfig,
};
use crate::neighbors::{
    background_cluster_count, background_variant, close_variant, BackgroundMode, CloseMode,
    ClusteringEnsemble,
};
use crate::objective::{
    chain_through_normalize, ir_grad_v, ir_loss, la_grad_v, la_loss, NeighborSets,
};
use crate::Result;

/// Iteration cap for each k-means run during reclustering.
pub const KMEANS_MAX_ITERS: usize = 100;

/// Cap on the global norm of each batch-mean parameter gradient during the
/// warm-start epochs. The temperature-scaled instance loss produces very
/// large gradients while the memory bank still holds its random
/// initialization; without a cap those steps dwarf the weight scale and
/// quench the embedding into a low-entropy configuration that the
/// aggregation phase — whose forces stop at the background-neighbor horizon
/// — can never undo. The cap binds only during that transient; measured
/// batch-mean norms fall well below it from the first aggregation epoch on,
/// so post-warm-start gradients run unclipped.
pub const WARM_GRAD_CLIP_NORM: f64 = 1.0;

const SALT_SPLIT: u64 = 0x5350;
const SALT_PARAMS: u64 = 0x5041;
const SALT_BANK: u64 = 0x424B;
const SALT_SHUFFLE: u64 = 0x5348;
const SALT_CLUSTER: u64 = 0x434C;
const SALT_CLUSTER_BG: u64 = 0x4342;

/// One splitmix64 round keyed by `salt`; derives independent seed streams
/// from the single config seed.
fn mix64(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What the recluster interval counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReclusterUnit {
    Epochs,
    Steps,
}

/// What the cluster ensemble is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSource {
    /// Current memory bank rows.
    Bank,
    /// Fresh encoder outputs on the training inputs, in bank order.
    Fresh,
}

/// Phase tag of a telemetry record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// State at initialization, before any update.
    Init,
    /// Instance-discrimination warm start.
    Warm,
    /// Aggregation objective.
    La,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Warm => "warm",
            Phase::La => "la",
        })
    }
}

pub fn background_mode_name(mode: BackgroundMode) -> &'static str {
    match mode {
        BackgroundMode::All => "all",
        BackgroundMode::Knn => "knn",
        BackgroundMode::Cluster => "cluster",
    }
}

pub fn parse_background_mode(s: &str) -> Result<BackgroundMode> {
    match s {
        "all" => Ok(BackgroundMode::All),
        "knn" => Ok(BackgroundMode::Knn),
        "cluster" => Ok(BackgroundMode::Cluster),
        _ => Err(LaError::Config(format!(
            "background mode must be all, knn, or cluster, got {s:?}"
        ))),
    }
}

pub fn close_mode_name(mode: CloseMode) -> &'static str {
    match mode {
        CloseMode::SelfOnly => "self",
        CloseMode::KnnClose => "knn_close",
        CloseMode::Ensemble => "ensemble",
    }
}

pub fn parse_close_mode(s: &str) -> Result<CloseMode> {
    match s {
        "self" => Ok(CloseMode::SelfOnly),
        "knn_close" => Ok(CloseMode::KnnClose),
        "ensemble" => Ok(CloseMode::Ensemble),
        _ => Err(LaError::Config(format!(
            "close mode must be self, knn_close, or ensemble, got {s:?}"
        ))),
    }
}

pub fn recluster_unit_name(unit: ReclusterUnit) -> &'static str {
    match unit {
        ReclusterUnit::Epochs => "epochs",
        ReclusterUnit::Steps => "steps",
    }
}

pub fn parse_recluster_unit(s: &str) -> Result<ReclusterUnit> {
    match s {
        "epochs" => Ok(ReclusterUnit::Epochs),
        "steps" => Ok(ReclusterUnit::Steps),
        _ => Err(LaError::Config(format!(
            "recluster unit must be epochs or steps, got {s:?}"
        ))),
    }
}

pub fn cluster_source_name(source: ClusterSource) -> &'static str {
    match source {
        ClusterSource::Bank => "bank",
        ClusterSource::Fresh => "fresh",
    }
}

pub fn parse_cluster_source(s: &str) -> Result<ClusterSource> {
    match s {
        "bank" => Ok(ClusterSource::Bank),
        "fresh" => Ok(ClusterSource::Fresh),
        _ => Err(LaError::Config(format!(
            "cluster source must be bank or fresh, got {s:?}"
        ))),
    }
}

/// Everything that determines a training run besides the dataset.
///
/// `k`, `m`, and `knn_k` are optional; `None` means size them from the
/// training-set size (see the `resolved_*` methods).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    /// Embedding dimension.
    pub dim: usize,
    /// Hidden layer widths of the encoder.
    pub hidden_dims: Vec<usize>,
    /// Softmax temperature.
    pub tau: f64,
    /// Weight decay.
    pub lambda: f64,
    /// Bank EMA rate: `row <- normalize((1 - t) * row + t * v)`.
    pub mixing: f64,
    /// Background kNN size; `None` sizes from the training set.
    pub k: Option<usize>,
    /// Clustering runs in the close-neighbor ensemble.
    pub h: usize,
    /// Clusters per run; `None` sizes from the training set.
    pub m: Option<usize>,
    /// Close kNN size for the `knn_close` variant.
    pub k_prime: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Leading epochs trained on instance discrimination.
    pub warm_start_epochs: usize,
    pub lr: f64,
    /// 1-based epochs at whose start the learning rate is cut 10x.
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    /// Recluster interval, counted in `recluster_unit`.
    pub recluster_every: usize,
    pub recluster_unit: ReclusterUnit,
    pub background_mode: BackgroundMode,
    pub close_mode: CloseMode,
    pub cluster_source: ClusterSource,
    /// Validation kNN neighbor count; `None` sizes from the training set.
    pub knn_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            dim: 128,
            hidden_dims: vec![128, 64],
            tau: 0.07,
            lambda: 1e-4,
            mixing: 0.5,
            k: None,
            h: 3,
            m: None,
            k_prime: 4,
            batch_size: 128,
            epochs: 200,
            warm_start_epochs: 10,
            lr: 0.03,
            lr_milestones: vec![120, 160],
            momentum: 0.9,
            recluster_every: 1,
            recluster_unit: ReclusterUnit::Epochs,
            background_mode: BackgroundMode::Knn,
            close_mode: CloseMode::Ensemble,
            cluster_source: ClusterSource::Bank,
            knn_k: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| LaError::Config(format!("key {key:?}: cannot parse {value:?}: {e}")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_value(key, part.trim()))
        .collect()
}

impl TrainConfig {
    /// Parses `key = value` lines. `#` starts a comment, blank lines are
    /// skipped, unknown or repeated keys are errors, and `auto` stands for
    /// `None` on the optional sizes. Absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LaError::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    line_no + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(LaError::Config(format!("duplicate key {key:?}")));
            }
            match key {
                "seed" => config.seed = parse_value(key, value)?,
                "dim" => config.dim = parse_value(key, value)?,
                "hidden_dims" => config.hidden_dims = parse_usize_list(key, value)?,
                "tau" => config.tau = parse_value(key, value)?,
                "lambda" => config.lambda = parse_value(key, value)?,
                "mixing" => config.mixing = parse_value(key, value)?,
                "k" => config.k = parse_auto(key, value)?,
                "h" => config.h = parse_value(key, value)?,
                "m" => config.m = parse_auto(key, value)?,
                "k_prime" => config.k_prime = parse_value(key, value)?,
                "batch_size" => config.batch_size = parse_value(key, value)?,
                "epochs" => config.epochs = parse_value(key, value)?,
                "warm_start_epochs" => config.warm_start_epochs = parse_value(key, value)?,
                "lr" => config.lr = parse_value(key, value)?,
                "lr_milestones" => config.lr_milestones = parse_usize_list(key, value)?,
                "momentum" => config.momentum = parse_value(key, value)?,
                "recluster_every" => config.recluster_every = parse_value(key, value)?,
                "recluster_unit" => config.recluster_unit = parse_recluster_unit(value)?,
                "background_mode" => config.background_mode = parse_background_mode(value)?,
                "close_mode" => config.close_mode = parse_close_mode(value)?,
                "cluster_source" => config.cluster_source = parse_cluster_source(value)?,
                "knn_k" => config.knn_k = parse_auto(key, value)?,
                _ => return Err(LaError::Config(format!("unknown key {key:?}"))),
            }
        }
        Ok(config)
    }

    /// Held-out rows for a dataset of `n` samples.
    pub fn val_count(n: usize) -> usize {
        (n / 10).max(1)
    }

    /// Bank rows for a dataset of `n` samples.
    pub fn train_count(n: usize) -> usize {
        n - Self::val_count(n)
    }

    /// Background kNN size for `n_train` bank rows.
    pub fn resolved_k(&self, n_train: usize) -> usize {
        self.k.unwrap_or((n_train / 300).max(32)).min(n_train)
    }

    /// Clusters per k-means run for `n_train` bank rows.
    pub fn resolved_m(&self, n_train: usize) -> usize {
        self.m.unwrap_or((n_train / 128).max(4)).min(n_train)
    }

    /// Validation kNN neighbor count for `n_train` bank rows.
    pub fn resolved_knn_k(&self, n_train: usize) -> usize {
        self.knn_k
            .unwrap_or_else(|| eval::default_knn_k(n_train))
            .min(n_train)
    }

    /// Checks the config against a dataset of `n` samples. Explicit sizes
    /// must fit in the training split; `auto` sizes clamp instead.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 20 {
            return Err(LaError::Config(format!(
                "training needs at least 20 samples, got {n}"
            )));
        }
        let n_train = Self::train_count(n);
        if self.dim < 2 {
            return Err(LaError::Config(format!(
                "embedding dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if !(self.tau.is_finite() && 0.0 < self.tau && self.tau <= 1.0) {
            return Err(LaError::Config(format!(
                "temperature must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LaError::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(LaError::Config(format!(
                "mixing rate must lie in [0, 1], got {}",
                self.mixing
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(LaError::Config(format!(
                "learning rate must be nonnegative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LaError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.h == 0 || self.k_prime == 0 || self.recluster_every == 0 {
            return Err(LaError::Config(
                "batch size, h, k_prime, and recluster interval must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            if self.warm_start_epochs != 0 {
                return Err(LaError::Config(
                    "a zero-epoch run cannot have warm-start epochs".into(),
                ));
            }
        } else if self.warm_start_epochs >= self.epochs {
            return Err(LaError::Config(format!(
                "warm-start epochs ({}) must be fewer than total epochs ({})",
                self.warm_start_epochs, self.epochs
            )));
        }
        for pair in self.lr_milestones.windows(2) {
            if pair[0] >= pair[1] {
                return Err(LaError::Config(
                    "lr milestones must be strictly increasing".into(),
                ));
            }
        }
        if self.lr_milestones.first().is_some_and(|&m| m == 0) {
            return Err(LaError::Config("lr milestones are 1-based epochs".into()));
        }
        for (name, value) in [("k", self.k), ("m", self.m), ("knn_k", self.knn_k)] {
            if let Some(v) = value {
                if v == 0 || v > n_train {
                    return Err(LaError::Config(format!(
                        "{name} must satisfy 1 <= {name} <= {n_train}, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Seeded validation split: a shuffled permutation of `0..n`, the first
/// tenth (at least one sample) held out, the rest in dataset order forming
/// the bank. Bank row `j` corresponds to dataset sample `train[j]`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, SALT_SPLIT));
    order.shuffle(&mut rng);
    let val_count = TrainConfig::val_count(n);
    let val = order[..val_count].to_vec();
    let mut train = order[val_count..].to_vec();
    train.sort_unstable();
    (train, val)
}

/// One telemetry row.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean loss over processed samples; NaN for the init record and for
    /// epochs where every sample was skipped.
    pub mean_loss: f64,
    /// Samples skipped this epoch (degenerate embedding or empty
    /// close-background intersection).
    pub skipped: u64,
    /// Validation kNN accuracy; NaN when the dataset has no labels.
    pub knn_acc: f64,
    pub local_density: f64,
    pub background_density: f64,
    pub seconds: f64,
}

/// Telemetry of one run: the init record followed by one record per epoch.
#[derive(Debug, Clone)]
pub struct TrainTelemetry {
    pub records: Vec<EpochRecord>,
    pub train_count: usize,
    pub val_count: usize,
}

impl TrainTelemetry {
    /// CSV with the fixed header
    /// `epoch,phase,mean_loss,skipped,knn_acc,local_density,background_density,seconds`.
    /// Everything except `seconds` is deterministic per seed.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,phase,mean_loss,skipped,knn_acc,local_density,background_density,seconds\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:.6},{},{:.6},{:.6},{:.6},{:.3}",
                r.epoch,
                r.phase,
                r.mean_loss,
                r.skipped,
                r.knn_acc,
                r.local_density,
                r.background_density,
                r.seconds
            )
            .expect("string write");
        }
        out
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub bank: MemoryBank,
    pub telemetry: TrainTelemetry,
}

/// Fits the close-neighbor ensemble on the bank with seeds derived from the
/// config seed and the recluster ordinal `boundary`.
pub fn recluster_bank(
    bank: &MemoryBank,
    config: &TrainConfig,
    boundary: u64,
) -> Result<ClusteringEnsemble> {
    let m = config.resolved_m(bank.len());
    let base_seed = mix64(mix64(config.seed, SALT_CLUSTER), boundary);
    ClusteringEnsemble::fit(bank, config.h, m, base_seed, KMEANS_MAX_ITERS)
}

/// Fits the coarse ensemble behind the cluster background variant. It uses
/// far fewer clusters than the close ensemble (sized so a cluster union is
/// about as large as the kNN background it replaces) and its own seed
/// stream, so background and close sets never collapse onto each other.
pub fn recluster_background_bank(
    bank: &MemoryBank,
    config: &TrainConfig,
    boundary: u64,
) -> Result<ClusteringEnsemble> {
    let k = config.resolved_k(bank.len());
    let m = background_cluster_count(bank.len(), k);
    let base_seed = mix64(mix64(config.seed, SALT_CLUSTER_BG), boundary);
    ClusteringEnsemble::fit(bank, config.h, m, base_seed, KMEANS_MAX_ITERS)
}

/// Embeds every training input with the current encoder, falling back to
/// the existing bank row when an output collapses to the origin.
fn embed_training_rows(
    dataset: &Dataset,
    train_idx: &[usize],
    params: &EncoderParams,
    bank: &MemoryBank,
) -> Result<Vec<EmbeddingVector>> {
    let rows: Vec<Result<EmbeddingVector>> = train_idx
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let (z, _) = encoder::forward(params, &dataset.input_f64(i))?;
            match EmbeddingVector::normalize(&z) {
                Ok(v) => Ok(v),
                Err(LaError::ZeroNorm { .. }) => EmbeddingVector::normalize(&bank.row_f64(j)),
                Err(e) => Err(e),
            }
        })
        .collect();
    rows.into_iter().collect()
}

/// Refits whichever ensembles the configured modes need, all on the same
/// source rows (bank or fresh encoder outputs).
fn build_ensembles(
    dataset: &Dataset,
    train_idx: &[usize],
    params: &EncoderParams,
    bank: &MemoryBank,
    config: &TrainConfig,
    boundary: u64,
) -> Result<(Option<ClusteringEnsemble>, Option<ClusteringEnsemble>)> {
    let fresh_bank;
    let source: &MemoryBank = match config.cluster_source {
        ClusterSource::Bank => bank,
        ClusterSource::Fresh => {
            let rows = embed_training_rows(dataset, train_idx, params, bank)?;
            fresh_bank = MemoryBank::from_vectors(&rows, None)?;
            &fresh_bank
        }
    };
    let close = if config.close_mode == CloseMode::Ensemble {
        Some(recluster_bank(source, config, boundary)?)
    } else {
        None
    };
    let background = if config.background_mode == BackgroundMode::Cluster {
        Some(recluster_background_bank(source, config, boundary)?)
    } else {
        None
    };
    Ok((close, background))
}

/// Validation kNN accuracy plus mean local and background density.
fn evaluate_epoch(
    dataset: &Dataset,
    val_idx: &[usize],
    val_labels: Option<&[u32]>,
    params: &EncoderParams,
    bank: &MemoryBank,
    knn_k: usize,
    tau: Temperature,
    local_rank: usize,
    band: (usize, usize),
) -> Result<(f64, f64, f64)> {
    let profile = density_profile(bank, local_rank, band)?;
    let knn_acc = match val_labels {
        None => f64::NAN,
        Some(truth) => val_knn_accuracy(dataset, val_idx, truth, params, bank, knn_k, tau)?,
    };
    Ok((knn_acc, profile.mean_local(), profile.mean_background()))
}

/// Fraction of held-out rows whose weighted kNN vote against the bank
/// matches their label. Collapsed embeddings count as misses.
fn val_knn_accuracy(
    dataset: &Dataset,
    val_idx: &[usize],
    truth: &[u32],
    params: &EncoderParams,
    bank: &MemoryBank,
    knn_k: usize,
    tau: Temperature,
) -> Result<f64> {
    let hits: Vec<Result<bool>> = val_idx
        .par_iter()
        .zip(truth.par_iter())
        .map(|(&i, &y)| {
            let (z, _) = encoder::forward(params, &dataset.input_f64(i))?;
            match EmbeddingVector::normalize(&z) {
                Ok(v) => Ok(knn_classify(&v, bank, knn_k, tau)?.0 == y),
                // A collapsed embedding cannot be classified.
                Err(LaError::ZeroNorm { .. }) => Ok(false),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut correct = 0usize;
    for hit in hits {
        if hit? {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

/// Recomputes the validation kNN accuracy that training reports in its
/// final telemetry record, from saved artifacts alone.
///
/// The held-out rows come from the same seeded split `train` uses, so the
/// dataset, the config seed, and the trained encoder and bank are enough
/// to reproduce the number exactly.
pub fn evaluate_knn(
    dataset: &Dataset,
    params: &EncoderParams,
    bank: &MemoryBank,
    config: &TrainConfig,
) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| LaError::Label("kNN evaluation needs a labeled dataset".into()))?;
    let (train_idx, val_idx) = split_indices(dataset.len(), config.seed);
    if bank.len() != train_idx.len() {
        return Err(LaError::Config(format!(
            "bank holds {} rows but the dataset splits into {} training samples; \
             the bank, dataset, and seed must come from the same run",
            bank.len(),
            train_idx.len()
        )));
    }
    let truth: Vec<u32> = val_idx.iter().map(|&i| labels[i]).collect();
    let knn_k = config.resolved_knn_k(bank.len());
    let tau = Temperature::new(config.tau)?;
    val_knn_accuracy(dataset, &val_idx, &truth, params, bank, knn_k, tau)
}

/// Fits a linear classifier on the training split's embeddings and scores
/// it on the held-out split, using the same seeded partition as `train`.
/// A collapsed embedding anywhere is an error: a probe over degenerate
/// features would measure nothing.
pub fn probe_split(
    dataset: &Dataset,
    params: &EncoderParams,
    probe: &ProbeConfig,
    split_seed: u64,
) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| LaError::Label("the linear probe needs a labeled dataset".into()))?;
    let (train_idx, val_idx) = split_indices(dataset.len(), split_seed);
    let embed = |idx: &[usize]| -> Result<(Vec<EmbeddingVector>, Vec<u32>)> {
        let rows: Vec<Result<EmbeddingVector>> = idx
            .par_iter()
            .map(|&i| {
                let (z, _) = encoder::forward(params, &dataset.input_f64(i))?;
                EmbeddingVector::normalize(&z)
            })
            .collect();
        let mut vectors = Vec::with_capacity(idx.len());
        for row in rows {
            vectors.push(row?);
        }
        let y = idx.iter().map(|&i| labels[i]).collect();
        Ok((vectors, y))
    };
    let (train_x, train_y) = embed(&train_idx)?;
    let (val_x, val_y) = embed(&val_idx)?;
    eval::linear_probe(&train_x, &train_y, &val_x, &val_y, probe)
}

type SampleOutcome = Option<(usize, f64, ParamGrads, EmbeddingVector)>;

/// Runs the full procedure on `dataset` and returns the trained encoder,
/// the final bank, and per-epoch telemetry.
///
/// Epoch flow: optional learning-rate cut, optional recluster (aggregation
/// phase only), then shuffled batches. Per sample: encode, normalize, take
/// the phase loss gradient, chain it through the normalization, and
/// backpropagate. The mean batch gradient steps the optimizer first; the
/// bank then folds in the embeddings computed before that step. Samples
/// whose embedding collapses or whose close and background sets are
/// disjoint are skipped and counted. Encoder parameters are rounded to f32
/// values at initialization and after every epoch, so saved artifacts
/// reproduce in-memory behavior exactly.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate(dataset.len())?;
    let tau = Temperature::new(config.tau)?;
    let (train_idx, val_idx) = split_indices(dataset.len(), config.seed);
    let n_train = train_idx.len();
    let k = config.resolved_k(n_train);
    let knn_k = config.resolved_knn_k(n_train);
    let local_rank = default_local_rank(n_train);
    let band = default_band(n_train);

    let mut params = EncoderParams::init(
        dataset.input_dim(),
        &config.hidden_dims,
        config.dim,
        mix64(config.seed, SALT_PARAMS),
    )?;
    let mut bank = MemoryBank::init_random(n_train, config.dim, mix64(config.seed, SALT_BANK))?;
    if let Some(labels) = dataset.labels() {
        bank.set_labels(train_idx.iter().map(|&i| labels[i]).collect())?;
    }
    let val_labels: Option<Vec<u32>> = dataset
        .labels()
        .map(|labels| val_idx.iter().map(|&i| labels[i]).collect());

    let mut telemetry = TrainTelemetry {
        records: Vec::new(),
        train_count: n_train,
        val_count: val_idx.len(),
    };
    if config.epochs == 0 {
        return Ok(TrainOutput {
            params,
            bank,
            telemetry,
        });
    }

    let mut optimizer = Sgd::new(config.lr, config.momentum, config.lambda, &params)?;
    let needs_ensembles = config.background_mode == BackgroundMode::Cluster
        || config.close_mode == CloseMode::Ensemble;
    let mut close_ensemble: Option<ClusteringEnsemble> = None;
    let mut background_ensemble: Option<ClusteringEnsemble> = None;
    let mut refits: u64 = 0;
    let mut la_steps: usize = 0;

    let init_started = Instant::now();
    let (knn_acc, local, background) = evaluate_epoch(
        dataset,
        &val_idx,
        val_labels.as_deref(),
        &params,
        &bank,
        knn_k,
        tau,
        local_rank,
        band,
    )?;
    telemetry.records.push(EpochRecord {
        epoch: 0,
        phase: Phase::Init,
        mean_loss: f64::NAN,
        skipped: 0,
        knn_acc,
        local_density: local,
        background_density: background,
        seconds: init_started.elapsed().as_secs_f64(),
    });

    for e in 1..=config.epochs {
        let epoch_started = Instant::now();
        let warm = e <= config.warm_start_epochs;
        let phase = if warm { Phase::Warm } else { Phase::La };
        if config.lr_milestones.contains(&e) {
            let reduced = optimizer.lr() * 0.1;
            optimizer.set_lr(reduced);
        }
        if !warm && needs_ensembles && config.recluster_unit == ReclusterUnit::Epochs {
            let la_epoch = e - config.warm_start_epochs - 1;
            if la_epoch % config.recluster_every == 0 {
                let (close, background) =
                    build_ensembles(dataset, &train_idx, &params, &bank, config, refits)?;
                close_ensemble = close;
                background_ensemble = background;
                refits += 1;
            }
        }

        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix64(mix64(config.seed, SALT_SHUFFLE), e as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut processed_total = 0usize;
        let mut skipped = 0u64;
        for batch in order.chunks(config.batch_size) {
            if !warm && needs_ensembles && config.recluster_unit == ReclusterUnit::Steps {
                if la_steps % config.recluster_every == 0 {
                    let (close, background) =
                        build_ensembles(dataset, &train_idx, &params, &bank, config, refits)?;
                    close_ensemble = close;
                    background_ensemble = background;
                    refits += 1;
                }
                la_steps += 1;
            }
            let close_ref = close_ensemble.as_ref();
            let background_ref = background_ensemble.as_ref();
            let params_ref = &params;
            let bank_ref = &bank;
            let outcomes: Vec<Result<SampleOutcome>> = batch
                .par_iter()
                .map(|&j| {
                    let x = dataset.input_f64(train_idx[j]);
                    let (z, cache) = encoder::forward(params_ref, &x)?;
                    let v = match EmbeddingVector::normalize(&z) {
                        Ok(v) => v,
                        Err(LaError::ZeroNorm { .. }) => return Ok(None),
                        Err(e) => return Err(e),
                    };
                    let (loss, grad_v) = if warm {
                        (
                            ir_loss(j, &v, bank_ref, tau)?,
                            ir_grad_v(j, &v, bank_ref, tau)?,
                        )
                    } else {
                        let background = background_variant(
                            config.background_mode,
                            j,
                            &v,
                            bank_ref,
                            k,
                            background_ref,
                        )?;
                        let close = close_variant(
                            config.close_mode,
                            j,
                            &v,
                            bank_ref,
                            config.k_prime,
                            close_ref,
                        )?;
                        let sets = NeighborSets { close, background };
                        match la_loss(&v, &sets, bank_ref, tau) {
                            Ok(l) => (l.value, la_grad_v(&v, &sets, bank_ref, tau)?),
                            Err(LaError::EmptyIntersection) => return Ok(None),
                            Err(e) => return Err(e),
                        }
                    };
                    let g_z = chain_through_normalize(&grad_v, &z)?;
                    let grads = encoder::backward(params_ref, &cache, &g_z)?;
                    Ok(Some((j, loss, grads, v)))
                })
                .collect();

            let mut total = ParamGrads::zeros_like(&params);
            let mut updates: Vec<(usize, EmbeddingVector)> = Vec::with_capacity(batch.len());
            for outcome in outcomes {
                match outcome? {
                    Some((j, loss, grads, v)) => {
                        total.add_assign(&grads)?;
                        loss_sum += loss;
                        updates.push((j, v));
                    }
                    None => skipped += 1,
                }
            }
            if updates.is_empty() {
                continue;
            }
            total.scale(1.0 / updates.len() as f64);
            if warm {
                total.clip_global_norm(WARM_GRAD_CLIP_NORM);
            }
            optimizer.step(&mut params, &total)?;
            // Bank rows fold in the embeddings computed before the step.
            updates.sort_by_key(|&(j, _)| j);
            let indices =
                IndexSet::new(updates.iter().map(|&(j, _)| j).collect(), n_train)?;
            let features: Vec<EmbeddingVector> =
                updates.iter().map(|(_, v)| v.clone()).collect();
            processed_total += updates.len();
            bank.update_rows(&indices, &features, config.mixing)?;
        }

        params.quantize_to_f32();
        let (knn_acc, local, background) = evaluate_epoch(
            dataset,
            &val_idx,
            val_labels.as_deref(),
            &params,
            &bank,
            knn_k,
            tau,
            local_rank,
            band,
        )?;
        let mean_loss = if processed_total > 0 {
            loss_sum / processed_total as f64
        } else {
            f64::NAN
        };
        telemetry.records.push(EpochRecord {
            epoch: e,
            phase,
            mean_loss,
            skipped,
            knn_acc,
            local_density: local,
            background_density: background,
            seconds: epoch_started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutput {
        params,
        bank,
        telemetry,
    })
}

/// One grid axis combination of the ablation harness.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub background: BackgroundMode,
    pub close: CloseMode,
    pub h: usize,
    pub m: usize,
    /// Final-epoch validation kNN accuracy; `None` when the run failed.
    pub final_knn_acc: Option<f64>,
    pub error: Option<String>,
}

/// Axes of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub background_modes: Vec<BackgroundMode>,
    pub close_modes: Vec<CloseMode>,
    /// `(h, m)` pairs for the clustering ensemble.
    pub hm: Vec<(usize, usize)>,
}

/// Trains one run per grid cell, all from the same base config and seed.
/// Cell order is background mode, then close mode, then `(h, m)`. A failed
/// cell records its error and the grid continues.
pub fn run_ablation_grid(
    dataset: &Dataset,
    base: &TrainConfig,
    grid: &AblationGrid,
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &background in &grid.background_modes {
        for &close in &grid.close_modes {
            for &(h, m) in &grid.hm {
                let mut config = base.clone();
                config.background_mode = background;
                config.close_mode = close;
                config.h = h;
                config.m = Some(m);
                let (final_knn_acc, error) = match train(dataset, &config) {
                    Ok(output) => (
                        output.telemetry.records.last().map(|r| r.knn_acc),
                        None,
                    ),
                    Err(e) => (None, Some(e.to_string())),
                };
                cells.push(AblationCell {
                    background,
                    close,
                    h,
                    m,
                    final_knn_acc,
                    error,
                });
            }
        }
    }
    cells
}

/// CSV of an ablation grid:
/// `background_mode,close_mode,h,m,final_knn_acc,error`.
pub fn ablation_to_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("background_mode,close_mode,h,m,final_knn_acc,error\n");
    for c in cells {
        let acc = match c.final_knn_acc {
            Some(a) => format!("{a:.6}"),
            None => String::new(),
        };
        let error = match &c.error {
            Some(e) => format!("\"{}\"", e.replace('"', "\"\"")),
            None => String::new(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            background_mode_name(c.background),
            close_mode_name(c.close),
            c.h,
            c.m,
            acc,
            error
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};
    use crate::eval::adjusted_rand_index;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_dataset() -> Dataset {
        generate(&GenConfig {
            classes: 3,
            per_class: 10,
            latent_dim: 2,
            input_dim: 8,
            noise_sigma: 0.05,
            seed: 21,
        })
        .unwrap()
        .dataset
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            hidden_dims: vec![8],
            k: Some(10),
            m: Some(3),
            h: 2,
            k_prime: 2,
            batch_size: 8,
            epochs: 3,
            warm_start_epochs: 1,
            lr_milestones: vec![],
            knn_k: Some(3),
            ..TrainConfig::default()
        }
    }

    fn flat_bits(params: &EncoderParams) -> Vec<u64> {
        params.flat_params().iter().map(|x| x.to_bits()).collect()
    }

    fn bank_bits(bank: &MemoryBank) -> Vec<u32> {
        (0..bank.len())
            .flat_map(|i| bank.row(i).iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn parse_covers_every_key() {
        let text = "\
seed = 7
dim = 32
hidden_dims = 16, 8
tau = 0.1
lambda = 0.0001
mixing = 0.4
k = 40
h = 2
m = auto
k_prime = 6
batch_size = 64
epochs = 20
warm_start_epochs = 2
lr = 0.05
lr_milestones = 12, 16
momentum = 0.8
recluster_every = 3
recluster_unit = steps
background_mode = cluster
close_mode = knn_close
cluster_source = fresh
knn_k = 15
";
        let config = TrainConfig::parse(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.dim, 32);
        assert_eq!(config.hidden_dims, vec![16, 8]);
        assert_eq!(config.tau, 0.1);
        assert_eq!(config.lambda, 0.0001);
        assert_eq!(config.mixing, 0.4);
        assert_eq!(config.k, Some(40));
        assert_eq!(config.h, 2);
        assert_eq!(config.m, None);
        assert_eq!(config.k_prime, 6);
        assert_eq!(config.batch_size, 64);
        assert_eq!(config.epochs, 20);
        assert_eq!(config.warm_start_epochs, 2);
        assert_eq!(config.lr, 0.05);
        assert_eq!(config.lr_milestones, vec![12, 16]);
        assert_eq!(config.momentum, 0.8);
        assert_eq!(config.recluster_every, 3);
        assert_eq!(config.recluster_unit, ReclusterUnit::Steps);
        assert_eq!(config.background_mode, BackgroundMode::Cluster);
        assert_eq!(config.close_mode, CloseMode::KnnClose);
        assert_eq!(config.cluster_source, ClusterSource::Fresh);
        assert_eq!(config.knn_k, Some(15));
    }

    #[test]
    fn parse_skips_comments_and_keeps_defaults() {
        let text = "# full-line comment\n\n  tau = 0.05  # trailing comment\nhidden_dims =\n";
        let config = TrainConfig::parse(text).unwrap();
        assert_eq!(config.tau, 0.05);
        assert_eq!(config.hidden_dims, Vec::<usize>::new());
        assert_eq!(config.dim, 128);
        assert_eq!(config.epochs, 200);
        assert_eq!(config.lr_milestones, vec![120, 160]);
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(TrainConfig::parse("mystery = 3").is_err());
        assert!(TrainConfig::parse("tau = 0.1\ntau = 0.2").is_err());
        assert!(TrainConfig::parse("just words").is_err());
        assert!(TrainConfig::parse("epochs = soon").is_err());
        assert!(TrainConfig::parse("background_mode = nearest").is_err());
        assert!(TrainConfig::parse("recluster_unit = minutes").is_err());
    }

    #[test]
    fn default_config_matches_reference_settings() {
        let config = TrainConfig::default();
        assert_eq!(config.dim, 128);
        assert_eq!(config.hidden_dims, vec![128, 64]);
        assert_eq!(config.tau, 0.07);
        assert_eq!(config.lambda, 1e-4);
        assert_eq!(config.mixing, 0.5);
        assert_eq!(config.h, 3);
        assert_eq!(config.k_prime, 4);
        assert_eq!(config.batch_size, 128);
        assert_eq!(config.epochs, 200);
        assert_eq!(config.warm_start_epochs, 10);
        assert_eq!(config.lr, 0.03);
        assert_eq!(config.lr_milestones, vec![120, 160]);
        assert_eq!(config.momentum, 0.9);
        assert_eq!(config.recluster_every, 1);
        assert_eq!(config.recluster_unit, ReclusterUnit::Epochs);
        assert_eq!(config.background_mode, BackgroundMode::Knn);
        assert_eq!(config.close_mode, CloseMode::Ensemble);
        assert_eq!(config.cluster_source, ClusterSource::Bank);
        assert!(config.k.is_none() && config.m.is_none() && config.knn_k.is_none());
    }

    #[test]
    fn resolved_sizes_scale_and_clamp() {
        let config = TrainConfig::default();
        assert_eq!(config.resolved_k(27), 27);
        assert_eq!(config.resolved_k(120_000), 400);
        assert_eq!(config.resolved_m(27), 4);
        assert_eq!(config.resolved_m(1280), 10);
        assert_eq!(config.resolved_knn_k(1800), 180);
        let explicit = TrainConfig {
            k: Some(64),
            ..TrainConfig::default()
        };
        assert_eq!(explicit.resolved_k(1800), 64);
    }

    #[test]
    fn validate_rejects_bad_settings() {
        let n = 100;
        let ok = TrainConfig::default();
        assert!(ok.validate(n).is_ok());
        assert!(ok.validate(19).is_err());
        let cases: Vec<TrainConfig> = vec![
            TrainConfig { dim: 1, ..ok.clone() },
            TrainConfig { tau: 0.0, ..ok.clone() },
            TrainConfig { tau: 1.5, ..ok.clone() },
            TrainConfig { mixing: 1.5, ..ok.clone() },
            TrainConfig { lr: -0.1, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { warm_start_epochs: 200, ..ok.clone() },
            TrainConfig { epochs: 0, warm_start_epochs: 1, ..ok.clone() },
            TrainConfig { lr_milestones: vec![10, 10], ..ok.clone() },
            TrainConfig { lr_milestones: vec![0, 10], ..ok.clone() },
            TrainConfig { k: Some(0), ..ok.clone() },
            TrainConfig { k: Some(91), ..ok.clone() },
            TrainConfig { m: Some(91), ..ok.clone() },
            TrainConfig { knn_k: Some(91), ..ok.clone() },
        ];
        for (i, config) in cases.iter().enumerate() {
            assert!(config.validate(n).is_err(), "case {i} should fail");
        }
        let zero = TrainConfig {
            epochs: 0,
            warm_start_epochs: 0,
            ..ok
        };
        assert!(zero.validate(n).is_ok());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let (train, val) = split_indices(100, 9);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 90);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (train2, val2) = split_indices(100, 9);
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let (_, val3) = split_indices(100, 10);
        assert_ne!(val, val3);
        // Tiny datasets still hold out at least one sample.
        let (train4, val4) = split_indices(5, 0);
        assert_eq!(val4.len(), 1);
        assert_eq!(train4.len(), 4);
    }

    #[test]
    fn zero_epochs_returns_initial_state_and_empty_telemetry() {
        let dataset = toy_dataset();
        let config = TrainConfig {
            epochs: 0,
            warm_start_epochs: 0,
            ..fast_config()
        };
        let output = train(&dataset, &config).unwrap();
        assert!(output.telemetry.records.is_empty());
        assert_eq!(output.telemetry.train_count, 27);
        assert_eq!(output.telemetry.val_count, 3);
        let expected_params = EncoderParams::init(
            dataset.input_dim(),
            &config.hidden_dims,
            config.dim,
            mix64(config.seed, SALT_PARAMS),
        )
        .unwrap();
        assert_eq!(flat_bits(&output.params), flat_bits(&expected_params));
        let expected_bank =
            MemoryBank::init_random(27, config.dim, mix64(config.seed, SALT_BANK)).unwrap();
        assert_eq!(bank_bits(&output.bank), bank_bits(&expected_bank));
    }

    #[test]
    fn zero_lr_freezes_encoder_and_bank_follows_ema() {
        let dataset = toy_dataset();
        // Background `all` with close `self` keeps the intersection nonempty
        // for every sample, so each bank row is mixed exactly once per epoch.
        let config = TrainConfig {
            lr: 0.0,
            epochs: 2,
            warm_start_epochs: 1,
            background_mode: BackgroundMode::All,
            close_mode: CloseMode::SelfOnly,
            ..fast_config()
        };
        let output = train(&dataset, &config).unwrap();

        let init_params = EncoderParams::init(
            dataset.input_dim(),
            &config.hidden_dims,
            config.dim,
            mix64(config.seed, SALT_PARAMS),
        )
        .unwrap();
        assert_eq!(flat_bits(&output.params), flat_bits(&init_params));

        let (train_idx, _) = split_indices(dataset.len(), config.seed);
        let mut expected =
            MemoryBank::init_random(27, config.dim, mix64(config.seed, SALT_BANK)).unwrap();
        for _ in 0..2 {
            for (j, &i) in train_idx.iter().enumerate() {
                let (z, _) = encoder::forward(&init_params, &dataset.input_f64(i)).unwrap();
                let v = EmbeddingVector::normalize(&z).unwrap();
                let set = IndexSet::new(vec![j], 27).unwrap();
                expected.update_rows(&set, &[v], config.mixing).unwrap();
            }
        }
        assert_eq!(bank_bits(&output.bank), bank_bits(&expected));
        for record in &output.telemetry.records {
            assert_eq!(record.skipped, 0);
        }
    }

    #[test]
    fn identical_runs_agree_bit_for_bit() {
        let dataset = toy_dataset();
        let config = fast_config();
        let a = train(&dataset, &config).unwrap();
        let b = train(&dataset, &config).unwrap();
        assert_eq!(flat_bits(&a.params), flat_bits(&b.params));
        assert_eq!(bank_bits(&a.bank), bank_bits(&b.bank));
        assert_eq!(a.telemetry.records.len(), b.telemetry.records.len());
        for (ra, rb) in a.telemetry.records.iter().zip(&b.telemetry.records) {
            assert_eq!(ra.epoch, rb.epoch);
            assert_eq!(ra.phase, rb.phase);
            assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
            assert_eq!(ra.skipped, rb.skipped);
            assert_eq!(ra.knn_acc.to_bits(), rb.knn_acc.to_bits());
            assert_eq!(ra.local_density.to_bits(), rb.local_density.to_bits());
            assert_eq!(
                ra.background_density.to_bits(),
                rb.background_density.to_bits()
            );
        }
        // Training moved both the encoder and the bank.
        let init_params = EncoderParams::init(
            dataset.input_dim(),
            &config.hidden_dims,
            config.dim,
            mix64(config.seed, SALT_PARAMS),
        )
        .unwrap();
        assert_ne!(flat_bits(&a.params), flat_bits(&init_params));
        let init_bank =
            MemoryBank::init_random(27, config.dim, mix64(config.seed, SALT_BANK)).unwrap();
        assert_ne!(bank_bits(&a.bank), bank_bits(&init_bank));
    }

    #[test]
    fn phases_follow_the_warm_start_boundary() {
        let dataset = toy_dataset();
        let output = train(&dataset, &fast_config()).unwrap();
        let phases: Vec<Phase> = output.telemetry.records.iter().map(|r| r.phase).collect();
        assert_eq!(phases, vec![Phase::Init, Phase::Warm, Phase::La, Phase::La]);
        let epochs: Vec<usize> = output.telemetry.records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
        assert!(output.telemetry.records[0].mean_loss.is_nan());
        assert!(output.telemetry.records[1].mean_loss.is_finite());
        for record in &output.telemetry.records {
            assert!((0.0..=1.0).contains(&record.knn_acc));
        }
    }

    #[test]
    fn telemetry_csv_has_fixed_header_and_shape() {
        let dataset = toy_dataset();
        let output = train(&dataset, &fast_config()).unwrap();
        let csv = output.telemetry.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,phase,mean_loss,skipped,knn_acc,local_density,background_density,seconds"
        );
        assert_eq!(csv.lines().count(), 5);
        let init_line = lines.next().unwrap();
        assert!(init_line.starts_with("0,init,NaN,0,"), "init line: {init_line}");
    }

    #[test]
    fn milestone_cut_matches_training_at_reduced_lr() {
        let dataset = toy_dataset();
        let base = TrainConfig {
            lr: 0.64,
            epochs: 2,
            warm_start_epochs: 1,
            ..fast_config()
        };
        let cut_from_start = TrainConfig {
            lr_milestones: vec![1],
            ..base.clone()
        };
        let reduced_everywhere = TrainConfig {
            lr: 0.64 * 0.1,
            ..base
        };
        let a = train(&dataset, &cut_from_start).unwrap();
        let b = train(&dataset, &reduced_everywhere).unwrap();
        assert_eq!(flat_bits(&a.params), flat_bits(&b.params));
        assert_eq!(bank_bits(&a.bank), bank_bits(&b.bank));
    }

    #[test]
    fn step_unit_reclustering_runs_deterministically() {
        let dataset = toy_dataset();
        let config = TrainConfig {
            recluster_unit: ReclusterUnit::Steps,
            recluster_every: 2,
            cluster_source: ClusterSource::Fresh,
            ..fast_config()
        };
        let a = train(&dataset, &config).unwrap();
        let b = train(&dataset, &config).unwrap();
        assert_eq!(flat_bits(&a.params), flat_bits(&b.params));
        assert_eq!(a.telemetry.records.len(), 4);
    }

    #[test]
    fn reclustering_recovers_three_well_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = StandardNormal;
        let centers = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..9 {
                let raw: Vec<f64> = center
                    .iter()
                    .map(|&x| {
                        let g: f64 = normal.sample(&mut rng);
                        x + 0.02 * g
                    })
                    .collect();
                rows.push(EmbeddingVector::normalize(&raw).unwrap());
                truth.push(c as u32);
            }
        }
        let bank = MemoryBank::from_vectors(&rows, None).unwrap();
        let config = TrainConfig {
            h: 3,
            m: Some(3),
            ..TrainConfig::default()
        };
        let ensemble = recluster_bank(&bank, &config, 0).unwrap();
        assert_eq!(ensemble.h(), 3);
        for member in ensemble.members() {
            let ari = adjusted_rand_index(member.assignment(), &truth).unwrap();
            assert_eq!(ari, 1.0, "member failed to recover the blobs");
        }
    }

    #[test]
    fn recluster_boundaries_draw_distinct_seeds() {
        let dataset = toy_dataset();
        let config = fast_config();
        let (train_idx, _) = split_indices(dataset.len(), config.seed);
        let bank = MemoryBank::init_random(
            train_idx.len(),
            config.dim,
            mix64(config.seed, SALT_BANK),
        )
        .unwrap();
        let a = recluster_bank(&bank, &config, 0).unwrap();
        let b = recluster_bank(&bank, &config, 0).unwrap();
        let c = recluster_bank(&bank, &config, 1).unwrap();
        assert_eq!(a.members()[0].assignment(), b.members()[0].assignment());
        // Different boundary, different k-means++ draws (same data, so the
        // partitions may still coincide; the seeds must differ).
        let seed0 = mix64(mix64(config.seed, SALT_CLUSTER), 0);
        let seed1 = mix64(mix64(config.seed, SALT_CLUSTER), 1);
        assert_ne!(seed0, seed1);
        assert_eq!(c.h(), 2);
    }

    #[test]
    fn cluster_background_uses_its_own_coarser_ensemble() {
        let dataset = toy_dataset();
        // k = 27 makes the coarse background ensemble use 3 clusters while
        // the close ensemble uses 9, so background unions are strictly
        // larger than close unions. Were both sets built from one ensemble
        // the loss would be identically zero.
        let config = TrainConfig {
            background_mode: BackgroundMode::Cluster,
            close_mode: CloseMode::Ensemble,
            epochs: 2,
            warm_start_epochs: 0,
            k: Some(27),
            m: Some(9),
            ..fast_config()
        };
        let output = train(&dataset, &config).unwrap();
        for record in &output.telemetry.records[1..] {
            assert_eq!(record.phase, Phase::La);
            // Own coarse cluster and own close cluster both contain the
            // sample, so the intersection can never be empty.
            assert_eq!(record.skipped, 0);
            assert!(
                record.mean_loss > 0.0,
                "aggregation loss degenerated to {}",
                record.mean_loss
            );
        }
    }

    #[test]
    fn ablation_grid_covers_the_product_in_order() {
        let dataset = toy_dataset();
        let base = TrainConfig {
            epochs: 1,
            warm_start_epochs: 0,
            ..fast_config()
        };
        let grid = AblationGrid {
            background_modes: vec![BackgroundMode::Knn, BackgroundMode::All],
            close_modes: vec![CloseMode::SelfOnly, CloseMode::Ensemble],
            hm: vec![(1, 3)],
        };
        let cells = run_ablation_grid(&dataset, &base, &grid);
        assert_eq!(cells.len(), 4);
        let order: Vec<(&str, &str)> = cells
            .iter()
            .map(|c| (background_mode_name(c.background), close_mode_name(c.close)))
            .collect();
        assert_eq!(
            order,
            vec![
                ("knn", "self"),
                ("knn", "ensemble"),
                ("all", "self"),
                ("all", "ensemble")
            ]
        );
        for cell in &cells {
            assert!(cell.error.is_none(), "cell failed: {:?}", cell.error);
            assert!(cell.final_knn_acc.is_some());
            assert_eq!((cell.h, cell.m), (1, 3));
        }
        let csv = ablation_to_csv(&cells);
        assert!(csv.starts_with("background_mode,close_mode,h,m,final_knn_acc,error\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("knn,self,1,3,"));
    }

    #[test]
    fn ablation_records_failures_and_continues() {
        let dataset = toy_dataset();
        // Cluster background without a valid close mode is fine; to force a
        // failure use an explicit k larger than the training split.
        let base = TrainConfig {
            epochs: 1,
            warm_start_epochs: 0,
            k: Some(1000),
            ..fast_config()
        };
        let grid = AblationGrid {
            background_modes: vec![BackgroundMode::Knn],
            close_modes: vec![CloseMode::SelfOnly],
            hm: vec![(1, 3)],
        };
        let cells = run_ablation_grid(&dataset, &base, &grid);
        assert_eq!(cells.len(), 1);
        assert!(cells[0].final_knn_acc.is_none());
        assert!(cells[0].error.is_some());
        let csv = ablation_to_csv(&cells);
        assert!(csv.lines().nth(1).unwrap().contains("\""));
    }

    #[test]
    fn saved_artifacts_reproduce_final_validation_accuracy() {
        let dataset = toy_dataset();
        let config = fast_config();
        let output = train(&dataset, &config).unwrap();
        let reported = output.telemetry.records.last().unwrap().knn_acc;

        let dir = tempfile::tempdir().unwrap();
        let bank_path = dir.path().join("run.labk");
        let encoder_path = dir.path().join("run.laen");
        output.bank.save(&bank_path).unwrap();
        output.params.save(&encoder_path).unwrap();

        let bank = MemoryBank::load(&bank_path).unwrap();
        let params = EncoderParams::load(&encoder_path).unwrap();
        let recomputed = evaluate_knn(&dataset, &params, &bank, &config).unwrap();
        // Saved tensors are exact f32 images of the in-memory state, so the
        // score must match to the bit, not within a tolerance.
        assert_eq!(recomputed.to_bits(), reported.to_bits());
    }

    #[test]
    fn evaluate_knn_rejects_a_bank_from_a_different_split() {
        let dataset = toy_dataset();
        let config = fast_config();
        let bank = MemoryBank::init_random(5, config.dim, 1).unwrap();
        let params = EncoderParams::init(dataset.input_dim(), &[8], config.dim, 1).unwrap();
        let err = evaluate_knn(&dataset, &params, &bank, &config).unwrap_err();
        assert!(matches!(err, LaError::Config(_)), "got {err:?}");
    }

    #[test]
    fn probe_split_scores_a_trained_encoder() {
        let dataset = toy_dataset();
        let config = fast_config();
        let output = train(&dataset, &config).unwrap();
        let probe = ProbeConfig {
            epochs: 30,
            ..ProbeConfig::default()
        };
        let acc = probe_split(&dataset, &output.params, &probe, config.seed).unwrap();
        assert!((0.0..=1.0).contains(&acc), "accuracy {acc} out of range");
        let again = probe_split(&dataset, &output.params, &probe, config.seed).unwrap();
        assert_eq!(acc.to_bits(), again.to_bits());
    }
}
