//! Server-side protocol: weighted aggregation, fine-tuning on the pooled
//! privacy-preserved images, validation-ranked client selection, persistence
//! of per-client selected sets, and the uplink-overhead accountant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{SelectedEntry, SelectedSet};
use crate::dataio::{round_half_up, Image, Sample};
use crate::error::{Error, Result};
use crate::fedclient::{train_ce, ClientUpdate};
use crate::model::{self, ModelParams};
use crate::numerics::{SgdHyper, Tensor};

/// Federated schemes known to the overhead accountant. Only `Cdfl`,
/// `FedAvg`, `FedProx`, and `Solo` are trainable in this crate; the others
/// exist so their published uplink-cost formulas can be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Cdfl,
    FedAvg,
    FedProx,
    Moon,
    FedDyn,
    Scaffold,
    FedHkd,
    Solo,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cdfl" => Ok(Scheme::Cdfl),
            "fedavg" => Ok(Scheme::FedAvg),
            "fedprox" => Ok(Scheme::FedProx),
            "moon" => Ok(Scheme::Moon),
            "feddyn" => Ok(Scheme::FedDyn),
            "scaffold" => Ok(Scheme::Scaffold),
            "fedhkd" => Ok(Scheme::FedHkd),
            "solo" => Ok(Scheme::Solo),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::Cdfl => "cdfl",
            Scheme::FedAvg => "fedavg",
            Scheme::FedProx => "fedprox",
            Scheme::Moon => "moon",
            Scheme::FedDyn => "feddyn",
            Scheme::Scaffold => "scaffold",
            Scheme::FedHkd => "fedhkd",
            Scheme::Solo => "solo",
        };
        f.write_str(s)
    }
}

/// A client's stored selected set, split into the server's training and
/// validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSets {
    pub train: Vec<SelectedEntry>,
    pub val: Vec<SelectedEntry>,
}

impl StoredSets {
    /// Canonical byte encoding; used for persistence checks and the
    /// checkpoint digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (tag, part) in [(b'T', &self.train), (b'V', &self.val)] {
            out.push(tag);
            out.extend_from_slice(&(part.len() as u64).to_le_bytes());
            for e in part {
                out.extend_from_slice(&(e.sample_index as u64).to_le_bytes());
                out.extend_from_slice(&(e.label as u64).to_le_bytes());
                out.extend_from_slice(&(e.image.height as u64).to_le_bytes());
                out.extend_from_slice(&(e.image.width as u64).to_le_bytes());
                out.extend_from_slice(&(e.image.channels as u64).to_le_bytes());
                for &p in &e.image.pixels {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
        out
    }
}

/// The server's persistent state across communication rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta_global: ModelParams,
    /// Latest received selected sets; entries survive rounds in which the
    /// client does not contribute.
    pub store: BTreeMap<usize, StoredSets>,
    /// Clients chosen to contribute next round.
    pub chosen: BTreeSet<usize>,
    pub round: usize,
}

impl ServerState {
    pub fn new(theta_global: ModelParams) -> Self {
        ServerState {
            theta_global,
            store: BTreeMap::new(),
            chosen: BTreeSet::new(),
            round: 0,
        }
    }
}

/// Stratified split of a selected set into server-side train/val parts.
///
/// The validation target is round-half-up of `val_fraction * n`, clamped so
/// both parts are non-empty when n >= 2; a single-entry set goes entirely
/// to validation (ranking needs it).
pub fn split_selected(
    set: &SelectedSet,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StoredSets> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid("val_fraction must be in [0, 1)"));
    }
    let n = set.entries.len();
    if n == 0 {
        return Err(Error::EmptyInput("selected set"));
    }
    if n == 1 {
        return Ok(StoredSets {
            train: Vec::new(),
            val: set.entries.clone(),
        });
    }
    let target_val = round_half_up(val_fraction * n as f64).clamp(1, n - 1);

    // Group entry positions by label, deterministic order.
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in set.entries.iter().enumerate() {
        by_label.entry(e.label).or_default().push(i);
    }
    // Distribute the validation quota across labels by largest remainder,
    // capped by group size.
    let labels: Vec<usize> = by_label.keys().cloned().collect();
    let mut quotas: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rema: Vec<(f64, usize)> = Vec::new();
    let mut assigned = 0usize;
    for &l in &labels {
        let share = target_val as f64 * by_label[&l].len() as f64 / n as f64;
        let q = (share.floor() as usize).min(by_label[&l].len());
        quotas.insert(l, q);
        assigned += q;
        rema.push((share - share.floor(), l));
    }
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = target_val.saturating_sub(assigned);
    while left > 0 {
        let mut progressed = false;
        for &(_, l) in &rema {
            if left == 0 {
                break;
            }
            if quotas[&l] < by_label[&l].len() {
                *quotas.get_mut(&l).unwrap() += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut val_positions: BTreeSet<usize> = BTreeSet::new();
    for &l in &labels {
        let mut positions = by_label[&l].clone();
        positions.shuffle(rng);
        for &p in positions.iter().take(quotas[&l]) {
            val_positions.insert(p);
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, e) in set.entries.iter().enumerate() {
        if val_positions.contains(&i) {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok(StoredSets { train, val })
}

/// Sample-count weighted average of the uploaded local models.
/// Updates are combined in ascending client id order, so the result is
/// independent of arrival order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::EmptyInput("client updates"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let total: f64 = sorted.iter().map(|u| u.n_i as f64).sum();
    if total == 0.0 {
        return Err(Error::invalid("all updates carry zero samples"));
    }
    let mut result = sorted[0].theta_l.clone();
    let mut tensors: Vec<Tensor> = result
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for update in &sorted {
        let w = update.n_i as f64 / total;
        if update.theta_l.tensors().len() != tensors.len() {
            return Err(Error::invalid("update tensor count mismatch"));
        }
        for (acc, t) in tensors.iter_mut().zip(update.theta_l.tensors().iter()) {
            if acc.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: acc.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data().iter()) {
                *a += w * v;
            }
        }
    }
    result.set_tensors(tensors)?;
    Ok(result)
}

fn pooled_train_samples(store: &BTreeMap<usize, StoredSets>) -> Vec<Sample> {
    let mut pool = Vec::new();
    for sets in store.values() {
        for e in &sets.train {
            pool.push(Sample {
                x: e.image.clone(),
                z: Some(e.image.clone()),
                y: e.label,
            });
        }
    }
    pool
}

/// Fine-tune the global model with CE over the pooled stored training
/// entries (pixelized images). No-op when the pool is empty or epochs is 0.
pub fn server_finetune(
    theta: &ModelParams,
    store: &BTreeMap<usize, StoredSets>,
    epochs: usize,
    batch_size: usize,
    hyper: SgdHyper,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    let pool = pooled_train_samples(store);
    if epochs == 0 || pool.is_empty() {
        return Ok(theta.clone());
    }
    let mut tuned = theta.clone();
    train_ce(&mut tuned, &pool, true, epochs, batch_size, hyper, rng)?;
    Ok(tuned)
}

/// Evaluate the global model on each stored validation set, rank clients by
/// accuracy (descending, ties to the lower id; clients with no stored set
/// rank last), and keep the top `max(1, round_half_up(fraction * N))`.
///
/// `eligible` restricts the ranking pool (the connected-only policy); the
/// default ranks all clients.
pub fn rank_and_select(
    theta: &ModelParams,
    store: &BTreeMap<usize, StoredSets>,
    select_fraction: f64,
    num_clients: usize,
    eligible: Option<&BTreeSet<usize>>,
) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&select_fraction) {
        return Err(Error::invalid("select_fraction must be in [0, 1]"));
    }
    let pool: Vec<usize> = match eligible {
        Some(set) => set.iter().cloned().collect(),
        None => (0..num_clients).collect(),
    };
    if pool.is_empty() {
        return Err(Error::EmptyInput("selection pool"));
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for &client in &pool {
        let score = match store.get(&client) {
            Some(sets) if !sets.val.is_empty() => {
                let pairs: Vec<(&Image, usize)> =
                    sets.val.iter().map(|e| (&e.image, e.label)).collect();
                model::accuracy_pairs(theta, &pairs)?
            }
            _ => f64::NEG_INFINITY,
        };
        scored.push((score, client));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let take = round_half_up(select_fraction * pool.len() as f64).max(1);
    Ok(scored.into_iter().take(take).map(|(_, c)| c).collect())
}

/// Round statistics the overhead formulas consume.
#[derive(Debug, Clone, Default)]
pub struct RoundStats {
    /// Number of clients uploading model weights (pN for the dense
    /// schemes).
    pub connected: usize,
    /// Parameters per client model.
    pub model_params: usize,
    /// Scalars per transmitted image.
    pub image_scalars: usize,
    /// Per contributing client, the number of selected images uploaded.
    pub selected_counts: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
}

/// Exact uplink scalar count for one round under the given scheme's cost
/// formula.
pub fn uplink_overhead(scheme: Scheme, stats: &RoundStats) -> Result<u128> {
    let params = stats.model_params as u128;
    let connected = stats.connected as u128;
    Ok(match scheme {
        Scheme::FedAvg | Scheme::FedProx | Scheme::Moon | Scheme::FedDyn => connected * params,
        Scheme::Scaffold => connected * (params + params),
        Scheme::FedHkd => {
            let c = stats.num_classes as u128;
            let v = stats.embed_dim as u128;
            connected * (params + c * (v + c))
        }
        Scheme::Cdfl => stats
            .selected_counts
            .iter()
            .map(|&s| params + s as u128 * stats.image_scalars as u128)
            .sum(),
        Scheme::Solo => 0,
    })
}

/// Per-round uplink ledger entry, split into model parameters and image
/// scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRow {
    pub round: usize,
    pub params: u128,
    pub image_scalars: u128,
}

impl LedgerRow {
    pub fn total(&self) -> u128 {
        self.params + self.image_scalars
    }
}

/// The communication-overhead accountant for one run.
#[derive(Debug, Clone, Default)]
pub struct OverheadLedger {
    pub rows: Vec<LedgerRow>,
}

impl OverheadLedger {
    pub fn push(&mut self, row: LedgerRow) {
        self.rows.push(row);
    }

    pub fn total(&self) -> u128 {
        self.rows.iter().map(|r| r.total()).sum()
    }

    pub fn total_params(&self) -> u128 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_image_scalars(&self) -> u128 {
        self.rows.iter().map(|r| r.image_scalars).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,params,image_scalars,total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.round,
                r.params,
                r.image_scalars,
                r.total()
            ));
        }
        out
    }
}

/// Index JSON for a server-state checkpoint: the global model lives in the
/// model binary; stored sets are summarized with a content digest so
/// persistence is externally checkable.
#[derive(Debug, Serialize, Deserialize)]
pub struct ServerCheckpointIndex {
    pub round: usize,
    pub chosen: Vec<usize>,
    pub store: Vec<StoredClientSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoredClientSummary {
    pub client_id: usize,
    pub train_entries: usize,
    pub val_entries: usize,
    pub digest: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn checkpoint_index(state: &ServerState) -> ServerCheckpointIndex {
    ServerCheckpointIndex {
        round: state.round,
        chosen: state.chosen.iter().cloned().collect(),
        store: state
            .store
            .iter()
            .map(|(&client_id, sets)| StoredClientSummary {
                client_id,
                train_entries: sets.train.len(),
                val_entries: sets.val.len(),
                digest: format!("{:016x}", fnv1a(&sets.to_bytes())),
            })
            .collect(),
    }
}
