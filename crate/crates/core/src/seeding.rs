//! Named deterministic RNG streams.
//!
//! Every random decision in a run draws from a ChaCha8 stream keyed by
//! (master_seed, round, actor, purpose). Streams are independent, so adding
//! work in one part of the protocol never perturbs another — this is what
//! makes the FedAvg reduction of the full protocol bit-exact: both schemes
//! share the `LocalBatches` stream for client batch ordering.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Actor id used for server-side and run-global streams.
pub const SERVER_ACTOR: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Global model initialization.
    ModelInit,
    /// Which clients are connected this round.
    Connectivity,
    /// Batch order for personalized-model training.
    PersonalizedBatches,
    /// Batch order for local-model training; shared with the baseline
    /// schemes' client training.
    LocalBatches,
    /// K-means seeding for pseudo-label computation.
    PseudoLabelKmeans,
    /// Train/validation split of a received selected set.
    SplitSelected,
    /// Batch order for server fine-tuning.
    ServerFinetune,
    /// Train/test split of the dataset.
    DataSplit,
}

fn tag(kind: StreamKind) -> u64 {
    match kind {
        StreamKind::ModelInit => 1,
        StreamKind::Connectivity => 2,
        StreamKind::PersonalizedBatches => 3,
        StreamKind::LocalBatches => 4,
        StreamKind::PseudoLabelKmeans => 5,
        StreamKind::SplitSelected => 6,
        StreamKind::ServerFinetune => 7,
        StreamKind::DataSplit => 8,
    }
}

/// Build the stream for (master_seed, round, actor, kind).
pub fn derive_rng(master_seed: u64, round: u64, actor: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&round.to_le_bytes());
    seed[16..24].copy_from_slice(&actor.to_le_bytes());
    seed[24..32].copy_from_slice(&tag(kind).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// A u64 sub-seed for components that take a plain seed.
pub fn derive_seed(master_seed: u64, round: u64, actor: u64, kind: StreamKind) -> u64 {
    derive_rng(master_seed, round, actor, kind).next_u64()
}
