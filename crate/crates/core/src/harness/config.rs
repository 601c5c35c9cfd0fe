//! Experiment configuration and validation.

use serde::{Deserialize, Serialize};

use crate::clustering::SelectionScope;
use crate::dataio::PartitionSpec;
use crate::error::{Error, Result};
use crate::fedserver::Scheme;
use crate::losses::LossWeights;
use crate::model::ArchConfig;
use crate::numerics::SgdHyper;
use crate::privacy::PixelizeConfig;

/// Where the training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        samples_per_class: usize,
        image_size: usize,
        noise_level: f64,
        seed: u64,
    },
    Dir {
        path: String,
    },
}

/// Which clients are eligible for validation ranking: everyone with a
/// stored set, or only this round's connected subset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPool {
    AllClients,
    ConnectedOnly,
}

fn d_rounds() -> usize {
    10
}
fn d_participation() -> f64 {
    0.8
}
fn d_select_fraction() -> f64 {
    0.5
}
fn d_m() -> usize {
    2
}
fn d_batch() -> usize {
    32
}
fn d_local_epochs() -> usize {
    5
}
fn d_server_epochs() -> usize {
    2
}
fn d_solo_epochs() -> usize {
    100
}
fn d_val_fraction() -> f64 {
    0.2
}
fn d_test_fraction() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_scope() -> SelectionScope {
    SelectionScope::ClusterMembers
}
fn d_pool() -> SelectionPool {
    SelectionPool::AllClients
}

/// Full description of one run; the experiment is a pure function of this
/// value.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub scheme: Scheme,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_participation")]
    pub participation: f64,
    #[serde(default = "d_select_fraction")]
    pub select_fraction: f64,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub pixelize: PixelizeConfig,
    #[serde(default)]
    pub sgd: SgdHyper,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_server_epochs")]
    pub server_epochs: usize,
    #[serde(default = "d_solo_epochs")]
    pub solo_epochs: usize,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    pub master_seed: u64,
    /// Network shape; defaults to the desk architecture sized from the
    /// dataset.
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    /// Evaluate client models on pixelized test images instead of
    /// originals.
    #[serde(default)]
    pub eval_on_pixelized: bool,
    /// Evaluate the global-model diagnostic on pixelized test images
    /// (matching the data it fine-tunes on).
    #[serde(default = "d_true")]
    pub global_eval_on_pixelized: bool,
    #[serde(default = "d_scope")]
    pub selection_scope: SelectionScope,
    #[serde(default)]
    pub persist_personalized: bool,
    #[serde(default = "d_pool")]
    pub selection_pool: SelectionPool,
}

impl ExperimentConfig {
    /// Hyperparameter defaults used throughout: lr 0.01, momentum 0.9,
    /// weight decay 1e-5, batch 32, 5 local epochs, participation 0.8,
    /// selection 0.5, lambdas 0.1/0.1/0.05.
    pub fn synthetic_desk(scheme: Scheme, master_seed: u64) -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                num_classes: 4,
                samples_per_class: 50,
                image_size: 16,
                noise_level: 0.08,
                seed: master_seed.wrapping_mul(7).wrapping_add(1),
            },
            partition: PartitionSpec {
                num_clients: 8,
                alpha: 0.5,
                seed: master_seed.wrapping_mul(13).wrapping_add(5),
            },
            scheme,
            rounds: d_rounds(),
            participation: d_participation(),
            select_fraction: d_select_fraction(),
            m: d_m(),
            loss_weights: LossWeights::default(),
            pixelize: PixelizeConfig::default(),
            sgd: SgdHyper::default(),
            batch_size: 8,
            local_epochs: d_local_epochs(),
            // The desk comparison leans on the pooled fine-tune; the
            // schema default stays at 2.
            server_epochs: 5,
            solo_epochs: d_solo_epochs(),
            val_fraction: d_val_fraction(),
            test_fraction: d_test_fraction(),
            master_seed,
            arch: None,
            eval_on_pixelized: false,
            global_eval_on_pixelized: true,
            selection_scope: d_scope(),
            persist_personalized: false,
            selection_pool: d_pool(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: &str| Err(Error::config(f, msg));
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                samples_per_class,
                image_size,
                noise_level,
                ..
            } => {
                if *num_classes < 2 {
                    return field("dataset.synthetic.num_classes", "must be at least 2");
                }
                if *samples_per_class == 0 {
                    return field("dataset.synthetic.samples_per_class", "must be positive");
                }
                if *image_size < 8 {
                    return field("dataset.synthetic.image_size", "must be at least 8");
                }
                if *noise_level < 0.0 {
                    return field("dataset.synthetic.noise_level", "must be non-negative");
                }
            }
            DatasetSpec::Dir { path } => {
                if path.is_empty() {
                    return field("dataset.dir.path", "must not be empty");
                }
            }
        }
        self.partition
            .validate()
            .map_err(|e| Error::config("partition", e.to_string()))?;
        match self.scheme {
            Scheme::Cdfl | Scheme::FedAvg | Scheme::FedProx | Scheme::Solo => {}
            other => {
                return field(
                    "scheme",
                    &format!("`{other}` is modeled for overhead only, not runnable"),
                )
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return field("participation", "must be in (0, 1]");
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return field("select_fraction", "must be in (0, 1]");
        }
        if self.m < 1 {
            return field("m", "must be at least 1");
        }
        self.loss_weights
            .validate()
            .map_err(|e| Error::config("loss_weights", e.to_string()))?;
        if self.pixelize.factor < 1 {
            return field("pixelize.factor", "must be at least 1");
        }
        self.sgd
            .validate()
            .map_err(|e| Error::config("sgd", e.to_string()))?;
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if self.local_epochs == 0 {
            return field("local_epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return field("val_fraction", "must be in [0, 1)");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return field("test_fraction", "must be in (0, 1)");
        }
        if let Some(arch) = &self.arch {
            arch.validate()
                .map_err(|e| Error::config("arch", e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_validates_and_roundtrips() {
        let cfg = ExperimentConfig::synthetic_desk(Scheme::Cdfl, 1);
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_fields_report_their_path() {
        let mut cfg = ExperimentConfig::synthetic_desk(Scheme::Cdfl, 1);
        cfg.participation = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("participation"), "{err}");

        let mut cfg = ExperimentConfig::synthetic_desk(Scheme::Cdfl, 1);
        cfg.loss_weights.tau = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("loss_weights"), "{err}");

        let mut cfg = ExperimentConfig::synthetic_desk(Scheme::Cdfl, 1);
        cfg.scheme = Scheme::Scaffold;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("scheme"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn defaults_match_stated_hyperparameters() {
        let cfg = ExperimentConfig::synthetic_desk(Scheme::Cdfl, 1);
        assert_eq!(cfg.sgd.lr, 0.01);
        assert_eq!(cfg.sgd.momentum, 0.9);
        assert_eq!(cfg.sgd.weight_decay, 1e-5);
        assert_eq!(cfg.local_epochs, 5);
        assert_eq!(cfg.participation, 0.8);
        assert_eq!(cfg.select_fraction, 0.5);
        assert_eq!(cfg.loss_weights.lambda1, 0.1);
        assert_eq!(cfg.loss_weights.lambda2, 0.1);
        assert_eq!(cfg.loss_weights.lambda3, 0.05);
        assert_eq!(cfg.solo_epochs, 100);
        // Desk fixture shrinks the batch; the library-wide default is 32.
        assert_eq!(super::d_batch(), 32);
    }
}
