//! The round loop: setup, per-round execution for each scheme, evaluation,
//! and run output files.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataio::{
    client_datasets, dirichlet_partition, load_dataset, round_half_up, synth_generate, Dataset,
    Sample,
};
use crate::error::{Error, Result};
use crate::fedclient::{ClientRoundConfig, ClientState, ClientUpdate};
use crate::fedserver::{
    aggregate, checkpoint_index, rank_and_select, server_finetune, split_selected, LedgerRow,
    OverheadLedger, RoundStats, Scheme, ServerState,
};
use crate::harness::config::{DatasetSpec, ExperimentConfig, SelectionPool};
use crate::model::{self, accuracy, ArchConfig, ModelParams};
use crate::privacy::pixelize;
use crate::seeding::{derive_rng, derive_seed, StreamKind, SERVER_ACTOR};
use crate::{baselines, fedserver};

/// One evaluation row. Mean and std are over the round's connected clients;
/// wall clock is informational only and deliberately kept out of the CSV so
/// reruns stay byte-identical.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub connected: Vec<usize>,
    /// Size of the contribution set in effect this round.
    pub chosen_size: usize,
    /// Clients that actually uploaded.
    pub contributing: usize,
    pub per_client_accuracy: Vec<(usize, f64)>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Global-model diagnostic accuracy.
    pub global_accuracy: f64,
    pub uplink_params: u128,
    pub uplink_image_scalars: u128,
    pub wall_clock_secs: f64,
}

pub const ROUNDS_CSV_HEADER: &str = "round,connected,chosen_size,contributing,mean_accuracy,std_accuracy,global_accuracy,uplink_params,uplink_image_scalars,uplink_total,client_accuracies";

fn metrics_to_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let connected = m
            .connected
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let accs = m
            .per_client_accuracy
            .iter()
            .map(|(c, a)| format!("{c}:{a}"))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            m.round,
            connected,
            m.chosen_size,
            m.contributing,
            m.mean_accuracy,
            m.std_accuracy,
            m.global_accuracy,
            m.uplink_params,
            m.uplink_image_scalars,
            m.uplink_params + m.uplink_image_scalars,
            accs
        ));
    }
    out
}

/// Completed run: metrics series, overhead ledger, per-round global models,
/// and the final server state.
pub struct RunResult {
    pub config: ExperimentConfig,
    pub metrics: Vec<RoundMetrics>,
    pub ledger: OverheadLedger,
    /// Global weights after each round; index 0 is the initialization.
    pub round_globals: Vec<ModelParams>,
    pub server: ServerState,
}

impl RunResult {
    pub fn rounds_csv(&self) -> String {
        metrics_to_csv(&self.metrics)
    }
}

/// First round whose mean accuracy reaches the target.
pub fn rounds_to_target(metrics: &[RoundMetrics], target: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.mean_accuracy >= target)
        .map(|m| m.round)
}

/// Series variant over (round, mean accuracy) pairs, for parsed CSV data.
pub fn rounds_to_target_series(series: &[(usize, f64)], target: f64) -> Option<usize> {
    series.iter().find(|(_, acc)| *acc >= target).map(|(r, _)| *r)
}

/// A fully materialized experiment, steppable one round at a time. The
/// normal entry point is [`run_experiment`]; tests drive rounds directly to
/// control connectivity.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub arch: ArchConfig,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub test_samples: Vec<Sample>,
    pub metrics: Vec<RoundMetrics>,
    pub ledger: OverheadLedger,
    pub round_globals: Vec<ModelParams>,
    last_chosen_size: usize,
    last_contributing: usize,
}

impl Experiment {
    pub fn setup(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = match &config.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                samples_per_class,
                image_size,
                noise_level,
                seed,
            } => synth_generate(*num_classes, *samples_per_class, *image_size, *noise_level, *seed)?,
            DatasetSpec::Dir { path } => load_dataset(Path::new(path))?,
        };
        let arch = match &config.arch {
            Some(a) => a.clone(),
            None => ArchConfig {
                in_channels: dataset.channels,
                height: dataset.height,
                width: dataset.width,
                ..ArchConfig::desk(dataset.height, dataset.num_classes)
            },
        };
        arch.validate()?;
        if arch.height != dataset.height
            || arch.width != dataset.width
            || arch.in_channels != dataset.channels
        {
            return Err(Error::config("arch", "input shape does not match the dataset"));
        }
        if arch.num_classes != dataset.num_classes {
            return Err(Error::config("arch.num_classes", "does not match the dataset"));
        }

        let split_seed = derive_seed(config.master_seed, 0, SERVER_ACTOR, StreamKind::DataSplit);
        let (train, test) = crate::dataio::train_test_split(&dataset, config.test_fraction, split_seed)?;
        let assignment = dirichlet_partition(&train.labels(), &config.partition)?;

        let attach_z = |ds: &Dataset| -> Result<Vec<Sample>> {
            ds.samples
                .iter()
                .map(|s| {
                    Ok(Sample {
                        x: s.x.clone(),
                        z: Some(pixelize(&s.x, &config.pixelize)?),
                        y: s.y,
                    })
                })
                .collect()
        };
        let test_samples = attach_z(&test)?;

        let init_seed = derive_seed(config.master_seed, 0, SERVER_ACTOR, StreamKind::ModelInit);
        let global = model::init(init_seed, &arch)?;

        let mut shards = client_datasets(&train, &assignment, config.partition.num_clients);
        for shard in &mut shards {
            for s in &mut shard.samples {
                s.z = Some(pixelize(&s.x, &config.pixelize)?);
            }
        }
        let clients: Vec<ClientState> = shards
            .into_iter()
            .map(|shard| {
                let id = shard.client_id;
                ClientState::new(id, shard, &global)
            })
            .collect();

        let server = ServerState::new(global.clone());
        Ok(Experiment {
            config: config.clone(),
            arch,
            clients,
            server,
            test_samples,
            metrics: Vec::new(),
            ledger: OverheadLedger::default(),
            round_globals: vec![global],
            last_chosen_size: 0,
            last_contributing: 0,
        })
    }

    fn client_round_config(&self) -> ClientRoundConfig {
        ClientRoundConfig {
            local_epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            sgd: self.config.sgd,
            loss_weights: self.config.loss_weights,
            m: self.config.m,
            selection_scope: self.config.selection_scope,
            persist_personalized: self.config.persist_personalized,
        }
    }

    fn image_scalars(&self) -> usize {
        self.arch.in_channels * self.arch.height * self.arch.width
    }

    /// Seeded connected subset for a round: a fixed-size random sample of
    /// `round_half_up(p * N)` clients, ascending ids.
    pub fn connected_for_round(&self, round: usize) -> Vec<usize> {
        let n = self.clients.len();
        let count = round_half_up(self.config.participation * n as f64).clamp(1, n);
        let mut ids: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(
            self.config.master_seed,
            round as u64,
            SERVER_ACTOR,
            StreamKind::Connectivity,
        );
        ids.shuffle(&mut rng);
        ids.truncate(count);
        ids.sort_unstable();
        ids
    }

    fn evaluate(&self, round: usize, connected: &[usize], chosen_size: usize, contributing: usize, row: LedgerRow, elapsed: f64) -> Result<RoundMetrics> {
        let mut per_client = Vec::with_capacity(connected.len());
        for &cid in connected {
            let acc = accuracy(
                &self.clients[cid].theta_l,
                &self.test_samples,
                self.config.eval_on_pixelized,
            )?;
            per_client.push((cid, acc));
        }
        let n = per_client.len() as f64;
        let mean = per_client.iter().map(|(_, a)| a).sum::<f64>() / n;
        let var = per_client
            .iter()
            .map(|(_, a)| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        let global_accuracy = accuracy(
            &self.server.theta_global,
            &self.test_samples,
            self.config.global_eval_on_pixelized,
        )?;
        Ok(RoundMetrics {
            round,
            connected: connected.to_vec(),
            chosen_size,
            contributing,
            per_client_accuracy: per_client,
            mean_accuracy: mean,
            std_accuracy: var.max(0.0).sqrt(),
            global_accuracy,
            uplink_params: row.params,
            uplink_image_scalars: row.image_scalars,
            wall_clock_secs: elapsed,
        })
    }

    /// Round-0 row: every client holds the initialization.
    pub fn record_init_metrics(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.clients.len()).collect();
        let row = LedgerRow {
            round: 0,
            params: 0,
            image_scalars: 0,
        };
        let m = self.evaluate(0, &all, 0, 0, row, 0.0)?;
        self.metrics.push(m);
        Ok(())
    }

    /// Execute one communication round with the given connected set.
    pub fn run_round(&mut self, round: usize, connected: &[usize]) -> Result<()> {
        let started = Instant::now();
        let row = match self.config.scheme {
            Scheme::Cdfl => self.cdfl_round(round, connected)?,
            Scheme::FedAvg | Scheme::FedProx => self.baseline_round(round, connected)?,
            Scheme::Solo => return Err(Error::invalid("solo has no communication rounds")),
            _ => unreachable!("validated at setup"),
        };
        self.ledger.push(row);
        self.round_globals.push(self.server.theta_global.clone());
        let (chosen_size, contributing) = (self.last_chosen_size, self.last_contributing);
        let m = self.evaluate(
            round,
            connected,
            chosen_size,
            contributing,
            row,
            started.elapsed().as_secs_f64(),
        )?;
        self.metrics.push(m);
        Ok(())
    }

    fn cdfl_round(&mut self, round: usize, connected: &[usize]) -> Result<LedgerRow> {
        let connected_set: BTreeSet<usize> = connected.iter().cloned().collect();
        // Round 1 bootstraps with every connected client; afterwards the
        // previous ranking governs, intersected with connectivity.
        let contribution: BTreeSet<usize> = if round <= 1 {
            connected_set.clone()
        } else {
            self.server.chosen.intersection(&connected_set).cloned().collect()
        };
        self.last_chosen_size = if round <= 1 {
            connected_set.len()
        } else {
            self.server.chosen.len()
        };

        let cfg = self.client_round_config();
        let mut updates: Vec<ClientUpdate> = Vec::new();
        for &cid in connected {
            let in_contribution = contribution.contains(&cid);
            if let Some(update) = self.clients[cid].client_round(
                &self.server.theta_global,
                &cfg,
                self.config.master_seed,
                round,
                in_contribution,
            )? {
                updates.push(update);
            }
        }
        self.last_contributing = updates.len();

        let selected_counts: Vec<usize> = updates.iter().map(|u| u.selected.len()).collect();
        if !updates.is_empty() {
            self.server.theta_global = aggregate(&updates)?;
            for update in &updates {
                let mut rng = derive_rng(
                    self.config.master_seed,
                    round as u64,
                    update.client_id as u64,
                    StreamKind::SplitSelected,
                );
                let sets = split_selected(&update.selected, self.config.val_fraction, &mut rng)?;
                self.server.store.insert(update.client_id, sets);
            }
        }
        let mut ft_rng = derive_rng(
            self.config.master_seed,
            round as u64,
            SERVER_ACTOR,
            StreamKind::ServerFinetune,
        );
        self.server.theta_global = server_finetune(
            &self.server.theta_global,
            &self.server.store,
            self.config.server_epochs,
            self.config.batch_size,
            self.config.sgd,
            &mut ft_rng,
        )?;
        if !self.server.store.is_empty() {
            let eligible = match self.config.selection_pool {
                SelectionPool::AllClients => None,
                SelectionPool::ConnectedOnly => Some(&connected_set),
            };
            self.server.chosen = rank_and_select(
                &self.server.theta_global,
                &self.server.store,
                self.config.select_fraction,
                self.clients.len(),
                eligible,
            )?;
        }
        self.server.round = round;

        let params_per_model = self.server.theta_global.parameter_count();
        let stats = RoundStats {
            connected: connected.len(),
            model_params: params_per_model,
            image_scalars: self.image_scalars(),
            selected_counts: selected_counts.clone(),
            num_classes: self.arch.num_classes,
            embed_dim: self.arch.embed_dim,
        };
        let total = fedserver::uplink_overhead(Scheme::Cdfl, &stats)?;
        let params = updates.len() as u128 * params_per_model as u128;
        let row = LedgerRow {
            round,
            params,
            image_scalars: total - params,
        };
        Ok(row)
    }

    fn baseline_round(&mut self, round: usize, connected: &[usize]) -> Result<LedgerRow> {
        let cfg = baselines::BaselineConfig {
            scheme: self.config.scheme,
            prox_mu: self.config.loss_weights.prox_mu,
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            sgd: self.config.sgd,
            solo_epochs: self.config.solo_epochs,
        };
        let (theta, contributed) = baselines::baseline_round(
            &mut self.clients,
            connected,
            &self.server.theta_global,
            &cfg,
            self.config.master_seed,
            round,
        )?;
        self.server.theta_global = theta;
        self.server.round = round;
        self.last_chosen_size = connected.len();
        self.last_contributing = contributed.len();
        let stats = RoundStats {
            connected: contributed.len(),
            model_params: self.server.theta_global.parameter_count(),
            image_scalars: self.image_scalars(),
            selected_counts: Vec::new(),
            num_classes: self.arch.num_classes,
            embed_dim: self.arch.embed_dim,
        };
        Ok(LedgerRow {
            round,
            params: fedserver::uplink_overhead(self.config.scheme, &stats)?,
            image_scalars: 0,
        })
    }

    fn solo_all(&mut self) -> Result<()> {
        let started = Instant::now();
        let cfg = baselines::BaselineConfig {
            scheme: Scheme::Solo,
            prox_mu: 0.0,
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            sgd: self.config.sgd,
            solo_epochs: self.config.solo_epochs,
        };
        for state in &mut self.clients {
            if state.dataset.samples.is_empty() {
                continue;
            }
            baselines::solo_train(state, &cfg, self.config.master_seed)?;
        }
        let row = LedgerRow {
            round: 1,
            params: 0,
            image_scalars: 0,
        };
        self.ledger.push(row);
        self.round_globals.push(self.server.theta_global.clone());
        let all: Vec<usize> = (0..self.clients.len()).collect();
        let m = self.evaluate(1, &all, 0, 0, row, started.elapsed().as_secs_f64())?;
        self.metrics.push(m);
        Ok(())
    }

    /// Run the configured schedule end to end.
    pub fn run_all(&mut self) -> Result<()> {
        self.record_init_metrics()?;
        if self.config.scheme == Scheme::Solo {
            return self.solo_all();
        }
        for round in 1..=self.config.rounds {
            let connected = self.connected_for_round(round);
            self.run_round(round, &connected)?;
        }
        Ok(())
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            config: self.config,
            metrics: self.metrics,
            ledger: self.ledger,
            round_globals: self.round_globals,
            server: self.server,
        }
    }
}

/// Execute a config end to end and optionally write the run directory:
/// `rounds.csv`, `ledger.csv`, `config.echo.json`, `global_model.ckpt`,
/// and `server_state.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunResult> {
    let mut experiment = Experiment::setup(config)?;
    experiment.run_all()?;
    let result = experiment.into_result();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rounds.csv"), result.rounds_csv())?;
        std::fs::write(dir.join("ledger.csv"), result.ledger.to_csv())?;
        let mut echo = serde_json::to_string_pretty(&result.config)?;
        echo.push('\n');
        std::fs::write(dir.join("config.echo.json"), echo)?;
        std::fs::write(
            dir.join("global_model.ckpt"),
            model::serialize(&result.server.theta_global),
        )?;
        let mut index = serde_json::to_string_pretty(&checkpoint_index(&result.server))?;
        index.push('\n');
        std::fs::write(dir.join("server_state.json"), index)?;
    }
    Ok(result)
}
