//! K-means over embeddings, pseudo-label assignment, and m-nearest
//! representative-image selection.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};

/// Default Lloyd iteration budget and convergence threshold.
pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-8;

/// Cluster centers in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub vectors: Vec<Vec<f64>>,
}

impl Centroids {
    pub fn new(vectors: Vec<Vec<f64>>) -> Self {
        Centroids { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(|v| v.len()).unwrap_or(0)
    }
}

/// Dense per-sample cluster assignment.
pub type PseudoLabels = Vec<usize>;

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Centroids,
    pub labels: PseudoLabels,
    /// Sum over points of the (unsquared) Euclidean distance to the
    /// assigned centroid.
    pub objective: f64,
    /// Squared-distance objective after each assignment step; this is the
    /// quantity Lloyd's algorithm monotonically decreases.
    pub objective_trace: Vec<f64>,
    /// Set when k was clamped down to the number of points.
    pub k_clamped: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point, ties to the lowest cluster index.
pub fn assign_pseudo_labels(points: &[Vec<f64>], centroids: &Centroids) -> Result<PseudoLabels> {
    if centroids.is_empty() {
        return Err(Error::EmptyInput("centroids"));
    }
    if points.iter().any(|p| p.len() != centroids.dim()) {
        return Err(Error::invalid("point/centroid dimension mismatch"));
    }
    Ok(points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in centroids.vectors.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect())
}

fn mean_of(points: &[Vec<f64>], members: &[usize], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for &i in members {
        for (acc, &v) in m.iter_mut().zip(points[i].iter()) {
            *acc += v;
        }
    }
    for v in m.iter_mut() {
        *v /= members.len() as f64;
    }
    m
}

/// K-means++ seeding from the given stream.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen: Vec<usize> = vec![rng.gen_range(0..points.len())];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| dist2(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // All remaining points coincide with a chosen centroid; fall
            // back to the lowest unused index.
            (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    chosen.iter().map(|&i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> KmeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; points.len()];
    let mut trace = Vec::new();
    let mut prev_obj = f64::INFINITY;

    for _ in 0..max_iters.max(1) {
        // Assignment step.
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, cent) in centroids.iter().enumerate() {
                let d = dist2(p, cent);
                if d < best.0 {
                    best = (d, c);
                }
            }
            labels[i] = best.1;
        }
        // Repair empty clusters: move each one onto the worst-fit point of
        // a cluster that can spare it. This only lowers the objective.
        loop {
            let mut sizes = vec![0usize; k];
            for &l in &labels {
                sizes[l] += 1;
            }
            let empty = match (0..k).find(|&c| sizes[c] == 0) {
                Some(c) => c,
                None => break,
            };
            let farthest = (0..points.len())
                .filter(|&i| sizes[labels[i]] >= 2)
                .max_by(|&a, &b| {
                    dist2(&points[a], &centroids[labels[a]])
                        .partial_cmp(&dist2(&points[b], &centroids[labels[b]]))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .expect("n >= k guarantees a donor cluster");
            centroids[empty] = points[farthest].clone();
            labels[farthest] = empty;
        }

        let obj: f64 = points
            .iter()
            .zip(labels.iter())
            .map(|(p, &l)| dist2(p, &centroids[l]))
            .sum();
        trace.push(obj);
        if prev_obj - obj < tol {
            break;
        }
        prev_obj = obj;

        // Update step.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            members[l].push(i);
        }
        for (c, m) in members.iter().enumerate() {
            if !m.is_empty() {
                centroids[c] = mean_of(points, m, dim);
            }
        }
    }

    let objective = points
        .iter()
        .zip(labels.iter())
        .map(|(p, &l)| dist2(p, &centroids[l]).sqrt())
        .sum();
    KmeansResult {
        centroids: Centroids::new(centroids),
        labels,
        objective,
        objective_trace: trace,
        k_clamped: false,
    }
}

/// Lloyd's algorithm with k-means++ seeding. If there are fewer points than
/// clusters, k is clamped and the result flags it.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::EmptyInput("points"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points have inconsistent dimensions"));
    }
    let clamped = k > points.len();
    let k_eff = k.min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = seed_centroids(points, k_eff, &mut rng);
    let mut result = lloyd(points, init, max_iters, tol);
    result.k_clamped = clamped;
    Ok(result)
}

/// Lloyd's algorithm warm-started from existing centroids; used for the
/// post-training centroid refresh.
pub fn kmeans_warm(
    points: &[Vec<f64>],
    initial: &Centroids,
    max_iters: usize,
    tol: f64,
) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::EmptyInput("points"));
    }
    if initial.is_empty() {
        return Err(Error::EmptyInput("initial centroids"));
    }
    if initial.len() > points.len() {
        return Err(Error::invalid("more centroids than points"));
    }
    if points.iter().any(|p| p.len() != initial.dim()) {
        return Err(Error::invalid("point/centroid dimension mismatch"));
    }
    Ok(lloyd(points, initial.vectors.clone(), max_iters, tol))
}

/// Whether selection may pick samples outside a centroid's own cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionScope {
    /// Nearest samples among the centroid's cluster members (default).
    ClusterMembers,
    /// Literal nearest samples over the whole local dataset.
    AllSamples,
}

/// One selected entry: the pixelized image and its label, plus the index of
/// the sample it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedEntry {
    pub sample_index: usize,
    pub image: crate::dataio::Image,
    pub label: usize,
}

/// The per-client privacy-preserved representative set.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSet {
    pub client_id: usize,
    /// Deduplicated union over clusters, in (cluster, distance) order.
    pub entries: Vec<SelectedEntry>,
    /// Per-cluster provenance: selected sample indices for each centroid.
    pub per_cluster: Vec<Vec<usize>>,
}

impl SelectedSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// For each centroid, pick the m nearest samples (by embedding distance,
/// ties to the lowest sample index) and union the picks. Entries hold the
/// pixelized image, never the original.
pub fn select_representatives(
    embeddings: &[Vec<f64>],
    samples: &[Sample],
    centroids: &Centroids,
    labels: &PseudoLabels,
    m: usize,
    scope: SelectionScope,
    client_id: usize,
) -> Result<SelectedSet> {
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    if embeddings.len() != samples.len() || labels.len() != samples.len() {
        return Err(Error::invalid("embeddings/samples/labels length mismatch"));
    }
    let mut per_cluster: Vec<Vec<usize>> = Vec::with_capacity(centroids.len());
    let mut entries: Vec<SelectedEntry> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (k, centroid) in centroids.vectors.iter().enumerate() {
        let mut candidates: Vec<usize> = match scope {
            SelectionScope::ClusterMembers => {
                (0..samples.len()).filter(|&i| labels[i] == k).collect()
            }
            SelectionScope::AllSamples => (0..samples.len()).collect(),
        };
        candidates.sort_by(|&a, &b| {
            dist2(&embeddings[a], centroid)
                .partial_cmp(&dist2(&embeddings[b], centroid))
                .unwrap()
                .then(a.cmp(&b))
        });
        candidates.truncate(m);
        for &i in &candidates {
            if seen.insert(i) {
                let image = samples[i]
                    .z
                    .clone()
                    .ok_or(Error::invalid("sample has no pixelized image"))?;
                entries.push(SelectedEntry {
                    sample_index: i,
                    image,
                    label: samples[i].y,
                });
            }
        }
        per_cluster.push(candidates);
    }
    Ok(SelectedSet {
        client_id,
        entries,
        per_cluster,
    })
}
