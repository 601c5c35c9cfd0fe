//! Dirichlet non-IID partitioning of sample indices across clients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::invalid("num_clients must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(())
    }
}

/// Assign each sample index to a client.
///
/// For each class, proportions are drawn from Dirichlet(alpha * 1_N) via
/// normalized Gamma draws and turned into integer counts with
/// largest-remainder rounding. A repair pass then guarantees every client
/// at least one sample by moving single samples off the largest client.
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if labels.len() < spec.num_clients {
        return Err(Error::invalid("need at least one sample per client"));
    }
    let n = spec.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;

    let num_classes = labels.iter().max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }

    let mut assignment = vec![0usize; labels.len()];
    for class_indices in by_class.iter().filter(|c| !c.is_empty()) {
        let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            // Degenerate underflow at extreme alpha: dump the class on one
            // uniformly chosen client.
            let lucky = rng.gen_range(0..n);
            draws = vec![0.0; n];
            draws[lucky] = 1.0;
        }
        let total: f64 = draws.iter().sum();
        let counts = largest_remainder(&draws, total, class_indices.len());
        let mut cursor = 0usize;
        for (client, &count) in counts.iter().enumerate() {
            for &sample in &class_indices[cursor..cursor + count] {
                assignment[sample] = client;
            }
            cursor += count;
        }
    }

    repair_empty_clients(&mut assignment, n);
    Ok(assignment)
}

/// Integer counts summing to `total_count`, proportional to `weights`.
fn largest_remainder(weights: &[f64], weight_sum: f64, total_count: usize) -> Vec<usize> {
    let n = weights.len();
    let mut counts = vec![0usize; n];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = w / weight_sum * total_count as f64;
        let floor = exact.floor() as usize;
        counts[i] = floor;
        assigned += floor;
        remainders.push((exact - floor as f64, i));
    }
    // Largest remainder first; ties go to the lower client id.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(total_count - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Move one sample at a time from the largest client to each empty client.
fn repair_empty_clients(assignment: &mut [usize], num_clients: usize) {
    loop {
        let mut counts = vec![0usize; num_clients];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let empty = match (0..num_clients).find(|&c| counts[c] == 0) {
            Some(c) => c,
            None => return,
        };
        let largest = (0..num_clients)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .unwrap();
        // Deterministic donor choice: the largest client's last sample.
        let donor_sample = (0..assignment.len())
            .rev()
            .find(|&i| assignment[i] == largest)
            .unwrap();
        assignment[donor_sample] = empty;
    }
}
