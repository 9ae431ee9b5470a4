//! Datasets on disk and the synthetic generator used at desk scale.
//!
//! Generated data has a planted class structure: class centers sit on the
//! unit sphere of a low-dimensional latent space with a minimum pairwise
//! angle, each sample is its center plus isotropic Gaussian noise, and a
//! fixed seeded affine-plus-ReLU map lifts latents to the input dimension.
//! The latent points and centers are returned alongside the dataset so
//! tests can verify separation against ground truth.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::EmbeddingVector;
use crate::error::LaError;
use crate::io::{ArtifactReader, ArtifactWriter};
use crate::Result;

const DATASET_MAGIC: &[u8; 4] = b"LADS";
const DATASET_VERSION: u32 = 1;

/// Consecutive rejected center candidates tolerated before giving up.
const MAX_CENTER_REJECTIONS: usize = 10_000;

/// N inputs of fixed dimension with optional evaluation labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
    input_dim: usize,
    inputs: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn from_parts(inputs: Vec<f32>, input_dim: usize, labels: Option<Vec<u32>>) -> Result<Self> {
        if input_dim == 0 {
            return Err(LaError::Config("input dimension must be positive".into()));
        }
        if inputs.is_empty() || inputs.len() % input_dim != 0 {
            return Err(LaError::DimensionMismatch(format!(
                "{} values do not form rows of dimension {input_dim}",
                inputs.len()
            )));
        }
        let n = inputs.len() / input_dim;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(LaError::Label(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
        }
        if n > u32::MAX as usize || input_dim > u32::MAX as usize {
            return Err(LaError::Config("dataset shape exceeds u32 range".into()));
        }
        Ok(Dataset {
            n,
            input_dim,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn input_f64(&self, i: usize) -> Vec<f64> {
        self.input(i).iter().map(|&x| x as f64).collect()
    }

    /// Evaluation-only labels; training code must not call this.
    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Writes magic `LADS`, version, N, input_dim, label flag, f32 inputs
    /// row-major, then u32 labels when present.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArtifactWriter::create(path, DATASET_MAGIC, DATASET_VERSION)?;
        w.write_u32(self.n as u32)?;
        w.write_u32(self.input_dim as u32)?;
        w.write_u8(self.labels.is_some() as u8)?;
        w.write_f32_slice(&self.inputs)?;
        if let Some(labels) = &self.labels {
            w.write_u32_slice(labels)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ArtifactReader::open(path, DATASET_MAGIC, DATASET_VERSION)?;
        let n = r.read_u32()? as usize;
        let input_dim = r.read_u32()? as usize;
        if n == 0 || input_dim == 0 {
            return Err(LaError::format(r.path(), "empty dataset"));
        }
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
        let inputs = r.read_f32_vec(n * input_dim)?;
        let labels = if has_labels {
            Some(r.read_u32_vec(n)?)
        } else {
            None
        };
        r.expect_eof()?;
        Dataset::from_parts(inputs, input_dim, labels)
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// A generated dataset plus its latent-space ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    /// Latent point per sample, row-major `n x latent_dim`.
    pub latents: Vec<f64>,
    /// Class center per class, row-major `classes x latent_dim`.
    pub centers: Vec<f64>,
}

/// Minimum pairwise angle enforced between class centers.
fn min_center_angle(classes: usize) -> f64 {
    (std::f64::consts::PI / classes as f64).min(std::f64::consts::PI / 3.0)
}

fn sample_centers(
    classes: usize,
    latent_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let min_cos = min_center_angle(classes).cos();
    let normal = StandardNormal;
    let mut centers: Vec<f64> = Vec::with_capacity(classes * latent_dim);
    let mut candidate = vec![0f64; latent_dim];
    let mut accepted = 0;
    let mut rejections = 0;
    while accepted < classes {
        for x in candidate.iter_mut() {
            *x = normal.sample(rng);
        }
        let unit = match EmbeddingVector::normalize(&candidate) {
            Ok(u) => u,
            Err(_) => continue,
        };
        let too_close = (0..accepted).any(|c| {
            let center = &centers[c * latent_dim..(c + 1) * latent_dim];
            let dot: f64 = unit.iter().zip(center.iter()).map(|(a, b)| a * b).sum();
            dot > min_cos
        });
        if too_close {
            rejections += 1;
            if rejections >= MAX_CENTER_REJECTIONS {
                return Err(LaError::Config(format!(
                    "could not place {classes} centers with pairwise angle >= {:.4} rad in {latent_dim}d after {MAX_CENTER_REJECTIONS} rejections",
                    min_center_angle(classes)
                )));
            }
            continue;
        }
        rejections = 0;
        centers.extend(unit.iter());
        accepted += 1;
    }
    Ok(centers)
}

/// Generates a labeled dataset: well-separated latent class centers,
/// Gaussian per-sample noise, then a fixed seeded affine+ReLU lift.
/// Deterministic per seed.
pub fn generate(config: &GenConfig) -> Result<GeneratedData> {
    if config.classes < 2 {
        return Err(LaError::Config(format!(
            "need at least 2 classes, got {}",
            config.classes
        )));
    }
    if config.per_class == 0 {
        return Err(LaError::Config("per_class must be positive".into()));
    }
    if config.latent_dim < 2 {
        return Err(LaError::Config(format!(
            "latent dimension must be at least 2, got {}",
            config.latent_dim
        )));
    }
    if config.input_dim < config.latent_dim {
        return Err(LaError::Config(format!(
            "input dimension {} must be at least the latent dimension {}",
            config.input_dim, config.latent_dim
        )));
    }
    if !config.noise_sigma.is_finite() || config.noise_sigma < 0.0 {
        return Err(LaError::Config(format!(
            "noise sigma must be finite and nonnegative, got {}",
            config.noise_sigma
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = StandardNormal;
    let (classes, per_class) = (config.classes, config.per_class);
    let (latent_dim, input_dim) = (config.latent_dim, config.input_dim);

    let centers = sample_centers(classes, latent_dim, &mut rng)?;

    // The lift: y = relu(W x + b), with W ~ N(0, 1/latent_dim) and a small
    // uniform bias. One fixed map for the whole dataset.
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let lift_w: Vec<f64> = (0..input_dim * latent_dim)
        .map(|_| {
            let g: f64 = normal.sample(&mut rng);
            g * scale
        })
        .collect();
    let lift_b: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-0.1..0.1)).collect();

    let n = classes * per_class;
    let mut latents = Vec::with_capacity(n * latent_dim);
    let mut inputs = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let center = &centers[class * latent_dim..(class + 1) * latent_dim];
        for _ in 0..per_class {
            let start = latents.len();
            for &c in center {
                let g: f64 = normal.sample(&mut rng);
                latents.push(c + config.noise_sigma * g);
            }
            let x = &latents[start..start + latent_dim];
            for o in 0..input_dim {
                let row = &lift_w[o * latent_dim..(o + 1) * latent_dim];
                let pre: f64 =
                    row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + lift_b[o];
                inputs.push(pre.max(0.0) as f32);
            }
            labels.push(class as u32);
        }
    }

    let dataset = Dataset::from_parts(inputs, input_dim, Some(labels))?;
    Ok(GeneratedData {
        dataset,
        latents,
        centers,
    })
}

impl GeneratedData {
    /// Leave-one-out 1-NN accuracy in the latent space, the generator's own
    /// separation oracle.
    pub fn latent_one_nn_accuracy(&self) -> f64 {
        let labels = self.dataset.labels().expect("generated data is labeled");
        let n = self.dataset.len();
        let d = self.latents.len() / n;
        let mut correct = 0usize;
        for i in 0..n {
            let xi = &self.latents[i * d..(i + 1) * d];
            let mut best = usize::MAX;
            let mut best_dist = f64::INFINITY;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = &self.latents[j * d..(j + 1) * d];
                let dist: f64 = xi
                    .iter()
                    .zip(xj.iter())
                    .map(|(a, b)| {
                        let diff = a - b;
                        diff * diff
                    })
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = j;
                }
            }
            if labels[best] == labels[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }
}
