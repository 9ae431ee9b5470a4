//! Training objectives and their analytic gradients.
//!
//! The aggregation loss for a sample with close set C and background set B is
//!
//! ```text
//! L = -log( P(C ∩ B | v) / P(B | v) ) = log S_B - log S_CB
//! ```
//!
//! where `S_A = sum_{j in A} exp(dot(v, row_j) / tau)`. The softmax
//! denominator over all N rows cancels in the ratio, so both sums are
//! evaluated only over B's rows with one shared max shift; rows outside B
//! cannot influence the value even at the bit level. The warm-start
//! instance loss is `-log P(i | v)` over the full bank.
//!
//! Gradients are with respect to v as a free vector; projecting onto the
//! tangent space of the unit sphere is [`chain_through_normalize`]'s job.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::MemoryBank;
use crate::embedding::{dot_row, shifted_exp_sum, EmbeddingVector, IndexSet, Temperature, MIN_NORM};
use crate::error::LaError;
use crate::Result;

/// Gradient with respect to an embedding, one entry per dimension.
pub type GradientVector = Vec<f64>;

/// The close and background sets identified for one sample.
#[derive(Debug, Clone)]
pub struct NeighborSets {
    pub close: IndexSet,
    pub background: IndexSet,
}

/// Aggregation loss value with its two log-sum-exp terms
/// (`value = log_sum_exp_background - log_sum_exp_close` up to rounding).
#[derive(Debug, Clone, Copy)]
pub struct LaLoss {
    pub value: f64,
    pub log_sum_exp_background: f64,
    pub log_sum_exp_close: f64,
}

fn check_dims(v: &[f64], bank: &MemoryBank) -> Result<()> {
    if v.len() != bank.dim() {
        return Err(LaError::DimensionMismatch(format!(
            "embedding has dimension {}, bank has {}",
            v.len(),
            bank.dim()
        )));
    }
    Ok(())
}

fn check_set(set: &IndexSet, bank: &MemoryBank) -> Result<()> {
    if let Some(&last) = set.as_slice().last() {
        if last >= bank.len() {
            return Err(LaError::IndexOutOfRange {
                index: last,
                len: bank.len(),
            });
        }
    }
    Ok(())
}

/// Logits `dot(v, row_j)/tau` for the members of `set`, in ascending index
/// order. Touches only the selected rows.
fn gathered_logits(v: &[f64], bank: &MemoryBank, set: &IndexSet, tau: Temperature) -> Vec<f64> {
    let inv = 1.0 / tau.value();
    set.iter().map(|j| dot_row(v, bank.row(j)) * inv).collect()
}

pub(crate) fn la_loss_raw(
    v: &[f64],
    sets: &NeighborSets,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<LaLoss> {
    check_dims(v, bank)?;
    check_set(&sets.background, bank)?;
    check_set(&sets.close, bank)?;
    if sets.background.is_empty() {
        return Err(LaError::Config("background set is empty".into()));
    }
    let inter = sets.close.intersect(&sets.background);
    if inter.is_empty() {
        return Err(LaError::EmptyIntersection);
    }
    let logits = gathered_logits(v, bank, &sets.background, tau);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum_b = 0.0;
    let mut sum_cb = 0.0;
    let inter_slice = inter.as_slice();
    let mut ip = 0;
    for (pos, j) in sets.background.iter().enumerate() {
        let e = (logits[pos] - max).exp();
        sum_b += e;
        if ip < inter_slice.len() && inter_slice[ip] == j {
            sum_cb += e;
            ip += 1;
        }
    }
    Ok(LaLoss {
        value: sum_b.ln() - sum_cb.ln(),
        log_sum_exp_background: max + sum_b.ln(),
        log_sum_exp_close: max + sum_cb.ln(),
    })
}

/// Aggregation loss `log S_B - log S_CB`; errors with `EmptyIntersection`
/// when the close set misses the background entirely.
pub fn la_loss(
    v: &EmbeddingVector,
    sets: &NeighborSets,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<LaLoss> {
    la_loss_raw(v.as_slice(), sets, bank, tau)
}

pub(crate) fn la_grad_v_raw(
    v: &[f64],
    sets: &NeighborSets,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<GradientVector> {
    check_dims(v, bank)?;
    check_set(&sets.background, bank)?;
    check_set(&sets.close, bank)?;
    if sets.background.is_empty() {
        return Err(LaError::Config("background set is empty".into()));
    }
    let inter = sets.close.intersect(&sets.background);
    if inter.is_empty() {
        return Err(LaError::EmptyIntersection);
    }
    let logits = gathered_logits(v, bank, &sets.background, tau);
    let (max, sum_b) = shifted_exp_sum(&logits);
    let inter_slice = inter.as_slice();
    let mut sum_cb = 0.0;
    {
        let mut ip = 0;
        for (pos, j) in sets.background.iter().enumerate() {
            if ip < inter_slice.len() && inter_slice[ip] == j {
                sum_cb += (logits[pos] - max).exp();
                ip += 1;
            }
        }
    }
    let inv_tau = 1.0 / tau.value();
    let mut grad = vec![0.0; v.len()];
    let mut ip = 0;
    for (pos, j) in sets.background.iter().enumerate() {
        let e = (logits[pos] - max).exp();
        let mut coef = e / sum_b;
        if ip < inter_slice.len() && inter_slice[ip] == j {
            coef -= e / sum_cb;
            ip += 1;
        }
        let row = bank.row(j);
        for (g, &x) in grad.iter_mut().zip(row.iter()) {
            *g += coef * inv_tau * x as f64;
        }
    }
    Ok(grad)
}

/// Gradient of [`la_loss`] with respect to v as a free vector:
/// `(1/tau) * (sum_{j in B} w_j row_j - sum_{j in C∩B} u_j row_j)` with
/// `w` the softmax weights over B and `u` the softmax weights over C∩B.
pub fn la_grad_v(
    v: &EmbeddingVector,
    sets: &NeighborSets,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<GradientVector> {
    la_grad_v_raw(v.as_slice(), sets, bank, tau)
}

pub(crate) fn ir_loss_raw(i: usize, v: &[f64], bank: &MemoryBank, tau: Temperature) -> Result<f64> {
    check_dims(v, bank)?;
    if i >= bank.len() {
        return Err(LaError::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    let logits = gathered_logits(v, bank, &IndexSet::full(bank.len()), tau);
    let (max, sum) = shifted_exp_sum(&logits);
    Ok(max + sum.ln() - logits[i])
}

/// Instance-recognition loss `-log P(i | v)` over the full bank, used for
/// warm-starting before neighbor sets mean anything.
pub fn ir_loss(i: usize, v: &EmbeddingVector, bank: &MemoryBank, tau: Temperature) -> Result<f64> {
    ir_loss_raw(i, v.as_slice(), bank, tau)
}

pub(crate) fn ir_grad_v_raw(
    i: usize,
    v: &[f64],
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<GradientVector> {
    check_dims(v, bank)?;
    if i >= bank.len() {
        return Err(LaError::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    let logits = gathered_logits(v, bank, &IndexSet::full(bank.len()), tau);
    let (max, sum) = shifted_exp_sum(&logits);
    let inv_tau = 1.0 / tau.value();
    let mut grad = vec![0.0; v.len()];
    for (j, &logit) in logits.iter().enumerate() {
        let p = (logit - max).exp() / sum;
        let row = bank.row(j);
        for (g, &x) in grad.iter_mut().zip(row.iter()) {
            *g += p * inv_tau * x as f64;
        }
    }
    let own = bank.row(i);
    for (g, &x) in grad.iter_mut().zip(own.iter()) {
        *g -= inv_tau * x as f64;
    }
    Ok(grad)
}

/// Gradient of [`ir_loss`] with respect to v as a free vector:
/// `(1/tau) * (sum_j p_j row_j - row_i)`.
pub fn ir_grad_v(
    i: usize,
    v: &EmbeddingVector,
    bank: &MemoryBank,
    tau: Temperature,
) -> Result<GradientVector> {
    ir_grad_v_raw(i, v.as_slice(), bank, tau)
}

/// Pulls a gradient in v = z/‖z‖ back to the pre-normalization vector z:
/// `g_z = (g - (g·v) v) / ‖z‖`, the tangent projection scaled by 1/‖z‖.
pub fn chain_through_normalize(g: &[f64], z: &[f64]) -> Result<GradientVector> {
    if g.len() != z.len() {
        return Err(LaError::DimensionMismatch(format!(
            "gradient has dimension {}, pre-normalization vector has {}",
            g.len(),
            z.len()
        )));
    }
    let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(LaError::ZeroNorm { norm });
    }
    let v: Vec<f64> = z.iter().map(|x| x / norm).collect();
    let g_dot_v: f64 = g.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    Ok(g
        .iter()
        .zip(v.iter())
        .map(|(gi, vi)| (gi - g_dot_v * vi) / norm)
        .collect())
}

/// One finite-difference comparison summary.
///
/// Per trial, the relative error is the worst coordinate disagreement
/// divided by the larger of the two gradients' max-norms (floored at 1e-12
/// so an all-zero pair cannot divide by zero).
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub trials: usize,
    pub step: f64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub max_abs_err: f64,
}

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let abs = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    (abs / scale, abs)
}

pub(crate) struct CheckCase {
    pub bank: MemoryBank,
    pub v: Vec<f64>,
    pub tau: Temperature,
    pub sets: NeighborSets,
    pub index: usize,
}

/// A random bank plus a random point and valid neighbor sets whose
/// intersection is guaranteed nonempty.
pub(crate) fn random_check_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let n = rng.random_range(8..60);
    let d = rng.random_range(4..17);
    let bank = MemoryBank::init_random(n, d, rng.random()).unwrap();
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = EmbeddingVector::normalize(&v).unwrap().as_slice().to_vec();
    let tau = Temperature::new(rng.random_range(0.05..2.0)).unwrap();
    let mut background: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if background.is_empty() {
        background.push(rng.random_range(0..n));
    }
    let anchor = background[rng.random_range(0..background.len())];
    let mut close: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.25)).collect();
    close.push(anchor);
    let sets = NeighborSets {
        close: IndexSet::new(close, n).unwrap(),
        background: IndexSet::new(background, n).unwrap(),
    };
    CheckCase {
        bank,
        v,
        tau,
        sets,
        index: anchor,
    }
}

fn central_difference<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], h: f64) -> Vec<f64> {
    let mut point = at.to_vec();
    (0..at.len())
        .map(|c| {
            let saved = point[c];
            point[c] = saved + h;
            let plus = f(&point);
            point[c] = saved - h;
            let minus = f(&point);
            point[c] = saved;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub(crate) fn summarize(errors: &[(f64, f64)], trials: usize, step: f64) -> GradCheckReport {
    let max_rel_err = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let mean_rel_err = errors.iter().map(|e| e.0).sum::<f64>() / errors.len().max(1) as f64;
    let max_abs_err = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    GradCheckReport {
        trials,
        step,
        max_rel_err,
        mean_rel_err,
        max_abs_err,
    }
}

/// Compares [`la_grad_v`] against central differences of [`la_loss`] on
/// random configurations; reports the worst per-coordinate absolute error.
pub fn gradcheck_aggregation(trials: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    if trials == 0 || h <= 0.0 || !h.is_finite() {
        return Err(LaError::Config("gradcheck needs trials >= 1 and h > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let case = random_check_case(&mut rng);
        let analytic = la_grad_v_raw(&case.v, &case.sets, &case.bank, case.tau)?;
        let numeric = central_difference(
            |p| la_loss_raw(p, &case.sets, &case.bank, case.tau).unwrap().value,
            &case.v,
            h,
        );
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(summarize(&errors, trials, h))
}

/// Compares [`ir_grad_v`] against central differences of [`ir_loss`].
pub fn gradcheck_instance(trials: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    if trials == 0 || h <= 0.0 || !h.is_finite() {
        return Err(LaError::Config("gradcheck needs trials >= 1 and h > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let case = random_check_case(&mut rng);
        let analytic = ir_grad_v_raw(case.index, &case.v, &case.bank, case.tau)?;
        let numeric = central_difference(
            |p| ir_loss_raw(case.index, p, &case.bank, case.tau).unwrap(),
            &case.v,
            h,
        );
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(summarize(&errors, trials, h))
}
