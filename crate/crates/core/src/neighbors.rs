//! Dynamic neighbor identification: k-means ensembles for close neighbors
//! and exact top-k similarity search for background neighbors.
//!
//! Close neighbors of sample `i` are found by clustering the bank H times
//! with different seeds and taking the union, over runs, of the cluster that
//! contains `i`. Membership is by index: row `i` of the bank is sample `i`,
//! so no label or identity lookup is needed. Background neighbors are the
//! `k` bank rows most similar to the sample's current embedding.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::MemoryBank;
use crate::embedding::{EmbeddingVector, IndexSet};
use crate::error::LaError;
use crate::io::{ArtifactReader, ArtifactWriter};
use crate::Result;

const CLUSTERING_MAGIC: &[u8; 4] = b"LACL";
const CLUSTERING_VERSION: u32 = 1;

/// Members per clustering ensemble when sizing a cluster-based background.
pub const BACKGROUND_ENSEMBLE_H: usize = 3;

/// Cluster count for a cluster-based background set: one cluster holds about
/// `k / BACKGROUND_ENSEMBLE_H` points, so the union over the ensemble has
/// roughly `k` members.
pub fn background_cluster_count(n: usize, k: usize) -> usize {
    let m = (BACKGROUND_ENSEMBLE_H as f64 * n as f64 / k as f64).round() as usize;
    m.clamp(2, n.max(2))
}

/// One k-means partition of the bank rows.
///
/// A clustering loaded from disk carries only the assignment; centroids and
/// inertia are recomputable from a bank and are reported as empty / NaN.
#[derive(Debug, Clone)]
pub struct Clustering {
    assignment: Vec<u32>,
    m: usize,
    d: usize,
    centroids: Vec<f64>,
    inertia: f64,
    inertia_trace: Vec<f64>,
}

impl Clustering {
    /// Wraps a raw assignment; every value must be below `m`.
    pub fn from_assignment(assignment: Vec<u32>, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(LaError::Config("cluster count must be positive".into()));
        }
        if assignment.is_empty() {
            return Err(LaError::Config("assignment must be non-empty".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c as usize >= m) {
            return Err(LaError::IndexOutOfRange {
                index: bad as usize,
                len: m,
            });
        }
        Ok(Clustering {
            assignment,
            m,
            d: 0,
            centroids: Vec::new(),
            inertia: f64::NAN,
            inertia_trace: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.m
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn has_centroids(&self) -> bool {
        !self.centroids.is_empty()
    }

    /// Centroid width; 0 for loaded clusterings, which carry no centroids.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Fitted centroids, row-major `m x d`; empty for loaded clusterings.
    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Final sum of squared point-to-centroid distances; NaN when loaded.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Inertia recorded after every assignment pass of the fit.
    pub fn inertia_trace(&self) -> &[f64] {
        &self.inertia_trace
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let diff = x - y;
            diff * diff
        })
        .sum()
}

/// Assigns each point to its nearest centroid; ties go to the lowest
/// centroid index because only a strictly smaller distance replaces the
/// current best.
fn assign_points(points: &[f64], n: usize, d: usize, centroids: &[f64], m: usize) -> Vec<u32> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &points[i * d..(i + 1) * d];
            let mut best = 0u32;
            let mut best_dist = f64::INFINITY;
            for c in 0..m {
                let dist = squared_distance(p, &centroids[c * d..(c + 1) * d]);
                if dist < best_dist {
                    best_dist = dist;
                    best = c as u32;
                }
            }
            best
        })
        .collect()
}

fn compute_inertia(points: &[f64], n: usize, d: usize, centroids: &[f64], assignment: &[u32]) -> f64 {
    (0..n)
        .map(|i| {
            let c = assignment[i] as usize;
            squared_distance(&points[i * d..(i + 1) * d], &centroids[c * d..(c + 1) * d])
        })
        .sum()
}

/// Recomputes centroids as member means, then repairs empty clusters by
/// donating the point farthest from its own centroid (ties to the smallest
/// point index, donors restricted to clusters that keep at least one
/// member). Donor means are refreshed, so on return every centroid is the
/// mean of its members under the (possibly mutated) assignment.
fn means_with_repair(points: &[f64], n: usize, d: usize, assignment: &mut [u32], m: usize) -> Vec<f64> {
    let mut centroids = vec![0f64; m * d];
    let mut sizes = vec![0usize; m];
    for i in 0..n {
        let c = assignment[i] as usize;
        sizes[c] += 1;
        for (slot, &x) in centroids[c * d..(c + 1) * d].iter_mut().zip(&points[i * d..(i + 1) * d]) {
            *slot += x;
        }
    }
    for c in 0..m {
        if sizes[c] > 0 {
            let inv = 1.0 / sizes[c] as f64;
            for slot in &mut centroids[c * d..(c + 1) * d] {
                *slot *= inv;
            }
        }
    }
    let empties: Vec<usize> = (0..m).filter(|&c| sizes[c] == 0).collect();
    for empty in empties {
        // n >= m guarantees some cluster still holds two or more points.
        let mut farthest: Option<(f64, usize)> = None;
        for i in 0..n {
            let c = assignment[i] as usize;
            if sizes[c] < 2 {
                continue;
            }
            let dist = squared_distance(&points[i * d..(i + 1) * d], &centroids[c * d..(c + 1) * d]);
            let better = match farthest {
                None => true,
                Some((best, _)) => dist > best,
            };
            if better {
                farthest = Some((dist, i));
            }
        }
        let (_, donor_point) = farthest.expect("pigeonhole: an empty cluster implies a donor");
        let donor_cluster = assignment[donor_point] as usize;
        assignment[donor_point] = empty as u32;
        sizes[donor_cluster] -= 1;
        sizes[empty] = 1;
        centroids[empty * d..(empty + 1) * d]
            .copy_from_slice(&points[donor_point * d..(donor_point + 1) * d]);
        // Refresh the donor's mean without the departed point.
        let inv = 1.0 / sizes[donor_cluster] as f64;
        let mut fresh = vec![0f64; d];
        for i in 0..n {
            if assignment[i] as usize == donor_cluster {
                for (slot, &x) in fresh.iter_mut().zip(&points[i * d..(i + 1) * d]) {
                    *slot += x;
                }
            }
        }
        for (slot, sum) in centroids[donor_cluster * d..(donor_cluster + 1) * d]
            .iter_mut()
            .zip(fresh.iter())
        {
            *slot = sum * inv;
        }
    }
    centroids
}

fn kmeans_pp_init(points: &[f64], n: usize, d: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(m * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut best_dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(&points[i * d..(i + 1) * d], &centroids[0..d]))
        .collect();
    while centroids.len() < m * d {
        let total: f64 = best_dist.iter().sum();
        let chosen = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best_dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); any point works.
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[chosen * d..(chosen + 1) * d]);
        let new_centroid = centroids[start..start + d].to_vec();
        for i in 0..n {
            let dist = squared_distance(&points[i * d..(i + 1) * d], &new_centroid);
            if dist < best_dist[i] {
                best_dist[i] = dist;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding on the bank rows.
///
/// Distances are squared Euclidean in the embedding space. Inertia is
/// recorded after every assignment pass and asserted nonincreasing; the fit
/// stops at an assignment fixpoint or after `max_iters` update rounds, and
/// in both cases the returned centroids are the means of the returned
/// assignment.
pub fn kmeans_fit(bank: &MemoryBank, m: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    let n = bank.len();
    let d = bank.dim();
    if m == 0 || m > n {
        return Err(LaError::Config(format!(
            "cluster count must satisfy 1 <= m <= {n}, got {m}"
        )));
    }
    if max_iters == 0 {
        return Err(LaError::Config("max_iters must be at least 1".into()));
    }
    let points: Vec<f64> = bank.rows_flat().iter().map(|&x| x as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = kmeans_pp_init(&points, n, d, m, &mut rng);
    let mut assignment = assign_points(&points, n, d, &centroids, m);
    let mut inertia = compute_inertia(&points, n, d, &centroids, &assignment);
    let mut trace = vec![inertia];
    let mut converged = false;

    for _ in 0..max_iters {
        let new_centroids = means_with_repair(&points, n, d, &mut assignment, m);
        let new_assignment = assign_points(&points, n, d, &new_centroids, m);
        let new_inertia = compute_inertia(&points, n, d, &new_centroids, &new_assignment);
        assert!(
            new_inertia <= inertia + inertia.abs() * 1e-12 + 1e-9,
            "inertia increased: {inertia} -> {new_inertia}"
        );
        trace.push(new_inertia);
        converged = new_assignment == assignment;
        centroids = new_centroids;
        inertia = new_inertia;
        assignment = new_assignment;
        if converged {
            break;
        }
    }
    if !converged {
        // Iteration budget ran out mid-round; realign centroids with the
        // stored assignment so the member-mean invariant holds on return.
        centroids = means_with_repair(&points, n, d, &mut assignment, m);
        inertia = compute_inertia(&points, n, d, &centroids, &assignment);
        trace.push(inertia);
    }

    Ok(Clustering {
        assignment,
        m,
        d,
        centroids,
        inertia,
        inertia_trace: trace,
    })
}

/// H clusterings of one bank, differing only in seed.
#[derive(Debug, Clone)]
pub struct ClusteringEnsemble {
    members: Vec<Clustering>,
}

impl ClusteringEnsemble {
    pub fn from_members(members: Vec<Clustering>) -> Result<Self> {
        if members.is_empty() {
            return Err(LaError::Config("ensemble needs at least one member".into()));
        }
        let n = members[0].len();
        if members.iter().any(|c| c.len() != n) {
            return Err(LaError::DimensionMismatch(
                "ensemble members must cover the same samples".into(),
            ));
        }
        Ok(ClusteringEnsemble { members })
    }

    /// Fits `h` clusterings with seeds `base_seed, base_seed+1, ..`.
    pub fn fit(bank: &MemoryBank, h: usize, m: usize, base_seed: u64, max_iters: usize) -> Result<Self> {
        if h == 0 {
            return Err(LaError::Config("ensemble needs at least one member".into()));
        }
        let members = (0..h)
            .map(|j| kmeans_fit(bank, m, base_seed.wrapping_add(j as u64), max_iters))
            .collect::<Result<Vec<_>>>()?;
        ClusteringEnsemble::from_members(members)
    }

    pub fn members(&self) -> &[Clustering] {
        &self.members
    }

    pub fn h(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.members[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes assignments only: magic `LACL`, version, N, H, then per member
    /// its cluster count and N u32 assignments.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        if n > u32::MAX as usize {
            return Err(LaError::Config("ensemble size exceeds u32 range".into()));
        }
        let mut w = ArtifactWriter::create(path, CLUSTERING_MAGIC, CLUSTERING_VERSION)?;
        w.write_u32(n as u32)?;
        w.write_u32(self.members.len() as u32)?;
        for member in &self.members {
            w.write_u32(member.cluster_count() as u32)?;
            w.write_u32_slice(member.assignment())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ArtifactReader::open(path, CLUSTERING_MAGIC, CLUSTERING_VERSION)?;
        let n = r.read_u32()? as usize;
        let h = r.read_u32()? as usize;
        if n == 0 || h == 0 {
            return Err(LaError::format(r.path(), "empty ensemble"));
        }
        let mut members = Vec::with_capacity(h);
        for _ in 0..h {
            let m = r.read_u32()? as usize;
            let assignment = r.read_u32_vec(n)?;
            let clustering = Clustering::from_assignment(assignment, m)
                .map_err(|e| LaError::format(r.path(), e.to_string()))?;
            members.push(clustering);
        }
        r.expect_eof()?;
        ClusteringEnsemble::from_members(members)
    }
}

/// Close neighbors of sample `i`: the union, over ensemble members, of the
/// cluster containing `i`. Always includes `i` itself.
pub fn close_neighbors(i: usize, ensemble: &ClusteringEnsemble) -> Result<IndexSet> {
    let n = ensemble.len();
    if i >= n {
        return Err(LaError::IndexOutOfRange { index: i, len: n });
    }
    let mut indices = Vec::new();
    for member in ensemble.members() {
        let target = member.assignment()[i];
        for (j, &c) in member.assignment().iter().enumerate() {
            if c == target {
                indices.push(j);
            }
        }
    }
    IndexSet::new(indices, n)
}

/// Heap entry ordered so the weakest candidate (smallest similarity, then
/// largest index) sits at the top of a max-heap.
#[derive(PartialEq)]
struct Weakest {
    sim: f64,
    index: usize,
}

impl Eq for Weakest {}

impl Ord for Weakest {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.index.cmp(&other.index))
    }
}

impl PartialOrd for Weakest {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` bank rows most similar to `v`, with similarities, ordered by
/// descending similarity and ascending index on ties.
///
/// A bounded heap of the best `k` candidates keeps the scan O(N log k);
/// rows stream through in blocks via the row-major layout.
pub(crate) fn top_k_ranked(
    v: &EmbeddingVector,
    bank: &MemoryBank,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let n = bank.len();
    if k == 0 || k > n {
        return Err(LaError::Config(format!(
            "top-k size must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    let sims = crate::embedding::similarity_row(v, bank)?;
    let mut heap: BinaryHeap<Weakest> = BinaryHeap::with_capacity(k + 1);
    for (index, &sim) in sims.iter().enumerate() {
        let candidate = Weakest { sim, index };
        if heap.len() < k {
            heap.push(candidate);
        } else if candidate < *heap.peek().expect("heap holds k entries") {
            heap.pop();
            heap.push(candidate);
        }
    }
    let mut ranked: Vec<(usize, f64)> = heap.into_iter().map(|w| (w.index, w.sim)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Background neighbors: indices of the `k` bank rows nearest to `v`.
pub fn knn_background(v: &EmbeddingVector, bank: &MemoryBank, k: usize) -> Result<IndexSet> {
    let ranked = top_k_ranked(v, bank, k)?;
    IndexSet::new(ranked.into_iter().map(|(i, _)| i).collect(), bank.len())
}

/// How the background set B_i is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Every bank row; the loss reduces to per-instance discrimination.
    All,
    /// The k nearest bank rows to the current embedding.
    Knn,
    /// Union of clusters containing i under a coarse ensemble sized so
    /// |B_i| is comparable to k.
    Cluster,
}

/// How the close set C_i is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseMode {
    /// Only the sample itself.
    SelfOnly,
    /// The k' nearest bank rows plus the sample itself.
    KnnClose,
    /// Union of the sample's clusters across the ensemble.
    Ensemble,
}

/// Dispatches background-set construction for ablations.
///
/// `Cluster` mode needs its own coarse ensemble (see
/// [`background_cluster_count`]); passing `None` for it is a config error.
pub fn background_variant(
    mode: BackgroundMode,
    i: usize,
    v: &EmbeddingVector,
    bank: &MemoryBank,
    k: usize,
    ensemble: Option<&ClusteringEnsemble>,
) -> Result<IndexSet> {
    if i >= bank.len() {
        return Err(LaError::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    match mode {
        BackgroundMode::All => Ok(IndexSet::full(bank.len())),
        BackgroundMode::Knn => {
            // The sample itself always belongs to its background set, even
            // when its bank row falls outside the k nearest rows; together
            // with i ∈ C_i this keeps C ∩ B nonempty.
            let near = knn_background(v, bank, k)?;
            Ok(near.union(&IndexSet::new(vec![i], bank.len())?))
        }
        BackgroundMode::Cluster => {
            let ensemble = ensemble.ok_or_else(|| {
                LaError::Config("cluster background mode needs a clustering ensemble".into())
            })?;
            close_neighbors(i, ensemble)
        }
    }
}

/// Dispatches close-set construction for ablations.
pub fn close_variant(
    mode: CloseMode,
    i: usize,
    v: &EmbeddingVector,
    bank: &MemoryBank,
    k_prime: usize,
    ensemble: Option<&ClusteringEnsemble>,
) -> Result<IndexSet> {
    if i >= bank.len() {
        return Err(LaError::IndexOutOfRange {
            index: i,
            len: bank.len(),
        });
    }
    match mode {
        CloseMode::SelfOnly => IndexSet::new(vec![i], bank.len()),
        CloseMode::KnnClose => {
            let near = knn_background(v, bank, k_prime)?;
            Ok(near.union(&IndexSet::new(vec![i], bank.len())?))
        }
        CloseMode::Ensemble => {
            let ensemble = ensemble.ok_or_else(|| {
                LaError::Config("ensemble close mode needs a clustering ensemble".into())
            })?;
            close_neighbors(i, ensemble)
        }
    }
}
