//! Dataset representation, synthetic data generation, on-disk formats,
//! train/test splitting, and Dirichlet non-IID partitioning.

mod disk;
mod partition;
mod synth;

pub use disk::{load_dataset, save_dataset, write_partition_csv};
pub use partition::{dirichlet_partition, PartitionSpec};
pub use synth::synth_generate;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Axis-aligned box over image rows/columns, half-open: rows in
/// [row0, row1), columns in [col0, col1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRegion {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl MaskRegion {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// An image with pixel values in [0, 1], stored row-major with interleaved
/// channels, plus the privacy-sensitive regions to be masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub mask_regions: Vec<MaskRegion>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        mask_regions: Vec<MaskRegion>,
    ) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Data(format!(
                "pixel count {} does not match {}x{}x{}",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        for r in &mask_regions {
            if r.row1 > height || r.col1 > width || r.row0 > r.row1 || r.col0 > r.col1 {
                return Err(Error::Data(format!("mask region {r:?} out of bounds")));
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
            mask_regions,
        })
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[self.idx(row, col, ch)]
    }
}

/// One data point: original image, optional pixelized twin, class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Image,
    pub z: Option<Image>,
    pub y: usize,
}

/// A flat labelled image collection with stable string ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }
}

/// One client's shard of the training data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub classes_present: BTreeSet<usize>,
}

impl ClientDataset {
    pub fn new(client_id: usize, samples: Vec<Sample>) -> Self {
        let classes_present = samples.iter().map(|s| s.y).collect();
        ClientDataset {
            client_id,
            samples,
            classes_present,
        }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Stratified train/test split.
///
/// Per class the test count is round-half-up of `test_fraction * n_c`,
/// clamped to leave at least one training sample; a single-sample class
/// goes entirely to train.
pub fn train_test_split(
    dataset: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must be in (0, 1)"));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.y].push(i);
    }
    let mut test_idx: BTreeSet<usize> = BTreeSet::new();
    for class_indices in by_class.iter_mut() {
        let n = class_indices.len();
        if n < 2 {
            continue;
        }
        let want = round_half_up(test_fraction * n as f64).min(n - 1);
        class_indices.shuffle(&mut rng);
        for &i in class_indices.iter().take(want) {
            test_idx.insert(i);
        }
    }
    let pick = |keep_test: bool| -> Dataset {
        let mut ids = Vec::new();
        let mut samples = Vec::new();
        for i in 0..dataset.len() {
            if test_idx.contains(&i) == keep_test {
                ids.push(dataset.ids[i].clone());
                samples.push(dataset.samples[i].clone());
            }
        }
        Dataset {
            num_classes: dataset.num_classes,
            height: dataset.height,
            width: dataset.width,
            channels: dataset.channels,
            ids,
            samples,
        }
    };
    Ok((pick(false), pick(true)))
}

/// Materialize per-client datasets from a partition assignment.
pub fn client_datasets(dataset: &Dataset, assignment: &[usize], num_clients: usize) -> Vec<ClientDataset> {
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); num_clients];
    for (i, &c) in assignment.iter().enumerate() {
        shards[c].push(dataset.samples[i].clone());
    }
    shards
        .into_iter()
        .enumerate()
        .map(|(id, samples)| ClientDataset::new(id, samples))
        .collect()
}
