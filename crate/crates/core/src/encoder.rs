//! A small MLP encoder: ReLU hidden layers, linear output, plain backprop.
//!
//! Parameters live in f64 but are quantized to f32-representable values at
//! init and at every epoch boundary, so the on-disk f32 checkpoint format
//! loses nothing and a save/load cycle reproduces the file byte for byte.
//!
//! The optimizer is SGD with classical momentum (`v <- mu*v + g`,
//! `p <- p - lr*v`). Weight decay follows the usual framework convention of
//! adding `lambda * w` to the weight gradient, and biases are never decayed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::MemoryBank;
use crate::embedding::IndexSet;
use crate::error::LaError;
use crate::io::{ArtifactReader, ArtifactWriter};
use crate::objective::{
    chain_through_normalize, la_grad_v_raw, la_loss_raw, GradCheckReport, NeighborSets,
};
use crate::Result;

const ENCODER_MAGIC: &[u8; 4] = b"LAEN";
const ENCODER_VERSION: u32 = 1;

/// One affine layer; weights are row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }
}

/// The full parameter set of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

impl EncoderParams {
    /// Fresh parameters: fan-in-scaled uniform weights with the rectifier
    /// gain, `(-sqrt(6/in_dim), sqrt(6/in_dim))`, so activation scale is
    /// preserved through the ReLU stack; biases zero; everything quantized
    /// to f32-representable values.
    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(LaError::Config("layer widths must be positive".into()));
        }
        if output_dim < 2 {
            return Err(LaError::Config(format!(
                "output dimension must be at least 2, got {output_dim}"
            )));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let bound = (6.0 / in_dim as f64).sqrt();
            let weights: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                .collect();
            layers.push(Layer {
                weights,
                biases: vec![0.0; out_dim],
                in_dim,
                out_dim,
            });
        }
        Ok(EncoderParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Layer widths from input to output, e.g. `[64, 128, 64, 16]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Rounds every parameter to the nearest f32, in place.
    pub fn quantize_to_f32(&mut self) {
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                *w = *w as f32 as f64;
            }
            for b in &mut layer.biases {
                *b = *b as f32 as f64;
            }
        }
    }

    pub(crate) fn flat_len(&self) -> usize {
        self.param_count()
    }

    pub(crate) fn get_flat(&self, mut index: usize) -> f64 {
        for layer in &self.layers {
            if index < layer.weights.len() {
                return layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                return layer.biases[index];
            }
            index -= layer.biases.len();
        }
        panic!("flat parameter index out of range");
    }

    #[cfg(test)]
    pub(crate) fn flat_params(&self) -> Vec<f64> {
        (0..self.flat_len()).map(|i| self.get_flat(i)).collect()
    }

    pub(crate) fn set_flat(&mut self, mut index: usize, value: f64) {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                layer.weights[index] = value;
                return;
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                layer.biases[index] = value;
                return;
            }
            index -= layer.biases.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Writes magic `LAEN`, version, layer count, then per layer its shape
    /// followed by f32 weights (row-major) and biases.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ArtifactWriter::create(path, ENCODER_MAGIC, ENCODER_VERSION)?;
        w.write_u32(self.layers.len() as u32)?;
        for layer in &self.layers {
            w.write_u32(layer.out_dim as u32)?;
            w.write_u32(layer.in_dim as u32)?;
            let weights: Vec<f32> = layer.weights.iter().map(|&x| x as f32).collect();
            w.write_f32_slice(&weights)?;
            let biases: Vec<f32> = layer.biases.iter().map(|&x| x as f32).collect();
            w.write_f32_slice(&biases)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ArtifactReader::open(path, ENCODER_MAGIC, ENCODER_VERSION)?;
        let layer_count = r.read_u32()? as usize;
        if layer_count == 0 {
            return Err(LaError::format(r.path(), "encoder has no layers"));
        }
        let mut layers = Vec::with_capacity(layer_count);
        let mut prev_out: Option<usize> = None;
        for li in 0..layer_count {
            let out_dim = r.read_u32()? as usize;
            let in_dim = r.read_u32()? as usize;
            if out_dim == 0 || in_dim == 0 {
                return Err(LaError::format(r.path(), format!("layer {li} has zero width")));
            }
            if let Some(prev) = prev_out {
                if prev != in_dim {
                    return Err(LaError::format(
                        r.path(),
                        format!("layer {li} expects input {in_dim} but previous outputs {prev}"),
                    ));
                }
            }
            prev_out = Some(out_dim);
            let weights: Vec<f64> = r
                .read_f32_vec(out_dim * in_dim)?
                .into_iter()
                .map(|x| x as f64)
                .collect();
            let biases: Vec<f64> = r
                .read_f32_vec(out_dim)?
                .into_iter()
                .map(|x| x as f64)
                .collect();
            layers.push(Layer {
                weights,
                biases,
                in_dim,
                out_dim,
            });
        }
        r.expect_eof()?;
        Ok(EncoderParams { layers })
    }
}

/// Intermediate activations kept by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the raw sample.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    preacts: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Pre-activations of layer `l`; hidden-layer ReLU masks come from these.
    pub fn preactivations(&self, l: usize) -> &[f64] {
        &self.preacts[l]
    }
}

/// Runs the encoder: ReLU after every hidden layer, linear final layer.
/// Returns the raw (un-normalized) output embedding and the cache.
pub fn forward(params: &EncoderParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != params.input_dim() {
        return Err(LaError::DimensionMismatch(format!(
            "input has dimension {}, encoder expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let layer_count = params.layers.len();
    let mut inputs = Vec::with_capacity(layer_count);
    let mut preacts = Vec::with_capacity(layer_count);
    let mut current = x.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut pre = layer.biases.clone();
        for (o, slot) in pre.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            *slot += row.iter().zip(current.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
        inputs.push(current);
        let out = if l + 1 < layer_count {
            pre.iter().map(|&p| p.max(0.0)).collect()
        } else {
            pre.clone()
        };
        preacts.push(pre);
        current = out;
    }
    Ok((current, ForwardCache { inputs, preacts }))
}

/// Per-layer parameter gradients, same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        ParamGrads {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn same_shape(&self, other: &ParamGrads) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.len() == b.len())
            && self
                .biases
                .iter()
                .zip(&other.biases)
                .all(|(a, b)| a.len() == b.len())
    }

    /// Accumulates `other` into self; shapes must match.
    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if !self.same_shape(other) {
            return Err(LaError::DimensionMismatch(
                "gradient shapes do not match".into(),
            ));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Euclidean norm over every weight and bias entry together.
    pub fn global_norm(&self) -> f64 {
        let mut sum = 0.0;
        for a in self.weights.iter().chain(self.biases.iter()) {
            for x in a {
                sum += x * x;
            }
        }
        sum.sqrt()
    }

    /// Rescales the gradient so its global norm is at most `max_norm`.
    /// Gradients already within the bound are untouched.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.weights {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
        for a in &mut self.biases {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn layer_weight_grads(&self, l: usize) -> &[f64] {
        &self.weights[l]
    }

    pub fn layer_bias_grads(&self, l: usize) -> &[f64] {
        &self.biases[l]
    }

    pub(crate) fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Backpropagates a gradient on the encoder output through the cache.
///
/// `g_output` is the loss gradient with respect to the raw output (already
/// chained through normalization when the loss acted on the unit vector).
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    g_output: &[f64],
) -> Result<ParamGrads> {
    if g_output.len() != params.output_dim() {
        return Err(LaError::DimensionMismatch(format!(
            "output gradient has dimension {}, encoder outputs {}",
            g_output.len(),
            params.output_dim()
        )));
    }
    if cache.inputs.len() != params.layers.len() {
        return Err(LaError::DimensionMismatch(
            "cache does not match encoder depth".into(),
        ));
    }
    let mut grads = ParamGrads::zeros_like(params);
    let mut delta = g_output.to_vec();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &cache.inputs[l];
        // dL/dW[o][i] = delta[o] * input[i]; dL/db[o] = delta[o].
        for o in 0..layer.out_dim {
            let grad_row = &mut grads.weights[l][o * layer.in_dim..(o + 1) * layer.in_dim];
            for (g, &x) in grad_row.iter_mut().zip(input.iter()) {
                *g = delta[o] * x;
            }
            grads.biases[l][o] = delta[o];
        }
        if l > 0 {
            let mut g_in = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let d = delta[o];
                for (slot, &w) in g_in.iter_mut().zip(row.iter()) {
                    *slot += w * d;
                }
            }
            // The previous layer is hidden, so its ReLU gates the gradient.
            let pre = &cache.preacts[l - 1];
            for (slot, &p) in g_in.iter_mut().zip(pre.iter()) {
                if p <= 0.0 {
                    *slot = 0.0;
                }
            }
            delta = g_in;
        }
    }
    Ok(grads)
}

/// SGD with classical momentum and weight-only L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: ParamGrads,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &EncoderParams) -> Result<Self> {
        // Zero is allowed: a frozen encoder still exercises the rest of the
        // training loop (useful for bank-only behavior checks).
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(LaError::Config(format!("learning rate must be nonnegative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(LaError::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(LaError::Config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: ParamGrads::zeros_like(params),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update: `v <- mu*v + (g + lambda*w)` on weights,
    /// `v <- mu*v + g` on biases, then `p <- p - lr*v`.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads) -> Result<()> {
        if !self.velocity.same_shape(grads) {
            return Err(LaError::DimensionMismatch(
                "gradient shapes do not match optimizer state".into(),
            ));
        }
        for (l, layer) in params.layers.iter_mut().enumerate() {
            for (i, w) in layer.weights.iter_mut().enumerate() {
                let g = grads.weights[l][i] + self.weight_decay * *w;
                let v = self.momentum * self.velocity.weights[l][i] + g;
                self.velocity.weights[l][i] = v;
                *w -= self.lr * v;
            }
            for (i, b) in layer.biases.iter_mut().enumerate() {
                let v = self.momentum * self.velocity.biases[l][i] + grads.biases[l][i];
                self.velocity.biases[l][i] = v;
                *b -= self.lr * v;
            }
        }
        Ok(())
    }
}

/// Finite-difference check of the full training gradient path:
/// input -> encoder -> normalize -> aggregation loss, differentiated with
/// respect to every encoder parameter.
///
/// Cases whose hidden pre-activations sit within 1e-2 of a ReLU kink (or
/// whose raw output is nearly zero-norm) are redrawn, since central
/// differences are meaningless across a kink.
pub fn gradcheck_chain(trials: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    if trials == 0 || h <= 0.0 || !h.is_finite() {
        return Err(LaError::Config("gradcheck needs trials >= 1 and h > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (params, x, bank, sets, tau) = loop {
            let input_dim = rng.random_range(3..8);
            let hidden = rng.random_range(4..10);
            let output_dim = rng.random_range(3..7);
            let params =
                EncoderParams::init(input_dim, &[hidden], output_dim, rng.random()).unwrap();
            let x: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (z, cache) = forward(&params, &x).unwrap();
            let kink_free = cache
                .preactivations(0)
                .iter()
                .all(|&p| p.abs() > 1e-2);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !kink_free || norm < 0.1 {
                continue;
            }
            let n = rng.random_range(6..26);
            let bank = MemoryBank::init_random(n, output_dim, rng.random()).unwrap();
            let mut background: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
            if background.is_empty() {
                background.push(0);
            }
            let anchor = background[rng.random_range(0..background.len())];
            let mut close: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
            close.push(anchor);
            let sets = NeighborSets {
                close: IndexSet::new(close, n).unwrap(),
                background: IndexSet::new(background, n).unwrap(),
            };
            let tau = crate::embedding::Temperature::new(rng.random_range(0.1..2.0)).unwrap();
            break (params, x, bank, sets, tau);
        };

        let loss_of = |p: &EncoderParams| -> f64 {
            let (z, _) = forward(p, &x).unwrap();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let v: Vec<f64> = z.iter().map(|zi| zi / norm).collect();
            la_loss_raw(&v, &sets, &bank, tau).unwrap().value
        };

        let (z, cache) = forward(&params, &x).unwrap();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let v: Vec<f64> = z.iter().map(|zi| zi / norm).collect();
        let g_v = la_grad_v_raw(&v, &sets, &bank, tau)?;
        let g_z = chain_through_normalize(&g_v, &z)?;
        let analytic = backward(&params, &cache, &g_z)?.flatten();

        let mut perturbed = params.clone();
        let mut numeric = Vec::with_capacity(params.flat_len());
        for c in 0..params.flat_len() {
            let saved = perturbed.get_flat(c);
            perturbed.set_flat(c, saved + h);
            let plus = loss_of(&perturbed);
            perturbed.set_flat(c, saved - h);
            let minus = loss_of(&perturbed);
            perturbed.set_flat(c, saved);
            numeric.push((plus - minus) / (2.0 * h));
        }
        errors.push(crate::objective::relative_error(&analytic, &numeric));
    }
    Ok(crate::objective::summarize(&errors, trials, h))
}
