//! FedAvg, FedProx, and SOLO reference implementations sharing the model,
//! data, and optimizer stack of the full protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedclient::{train_ce, train_prox, ClientState, ClientUpdate};
use crate::fedserver::{aggregate, Scheme};
use crate::model::ModelParams;
use crate::numerics::SgdHyper;
use crate::seeding::{derive_rng, StreamKind};

/// Baseline runner configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BaselineConfig {
    pub scheme: Scheme,
    /// Proximal coefficient; only FedProx reads it.
    pub prox_mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdHyper,
    /// SOLO ignores communication rounds and trains once for this many
    /// epochs.
    pub solo_epochs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            scheme: Scheme::FedAvg,
            prox_mu: 0.0,
            epochs: 5,
            batch_size: 32,
            sgd: SgdHyper::default(),
            solo_epochs: 100,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prox_mu < 0.0 {
            return Err(Error::invalid("prox_mu must be non-negative"));
        }
        match self.scheme {
            Scheme::FedAvg | Scheme::FedProx | Scheme::Solo => Ok(()),
            other => Err(Error::invalid(format!(
                "scheme `{other}` is modeled for overhead only, not trainable"
            ))),
        }
    }
}

/// One FedProx client pass: CE plus the proximal pull toward the broadcast
/// weights. The batch stream is shared with every other scheme's client
/// training.
pub fn fedprox_local(
    state: &mut ClientState,
    theta_global: &ModelParams,
    prox_mu: f64,
    cfg: &BaselineConfig,
    master_seed: u64,
    round: usize,
) -> Result<()> {
    state.theta_l = theta_global.clone();
    let mut rng = derive_rng(
        master_seed,
        round as u64,
        state.client_id as u64,
        StreamKind::LocalBatches,
    );
    train_prox(
        &mut state.theta_l,
        theta_global,
        &state.dataset.samples,
        prox_mu,
        cfg.epochs,
        cfg.batch_size,
        cfg.sgd,
        &mut rng,
    )
}

/// One baseline communication round: every connected client trains from the
/// broadcast weights on its original images, and the server aggregates all
/// resulting updates weighted by sample count.
pub fn baseline_round(
    clients: &mut [ClientState],
    connected: &[usize],
    theta_global: &ModelParams,
    cfg: &BaselineConfig,
    master_seed: u64,
    round: usize,
) -> Result<(ModelParams, Vec<usize>)> {
    cfg.validate()?;
    let mut updates: Vec<ClientUpdate> = Vec::new();
    for &cid in connected {
        let state = clients
            .get_mut(cid)
            .ok_or_else(|| Error::invalid(format!("unknown client {cid}")))?;
        if state.dataset.samples.is_empty() {
            continue;
        }
        match cfg.scheme {
            Scheme::FedAvg => {
                state.theta_l = theta_global.clone();
                let mut rng = derive_rng(
                    master_seed,
                    round as u64,
                    cid as u64,
                    StreamKind::LocalBatches,
                );
                train_ce(
                    &mut state.theta_l,
                    &state.dataset.samples,
                    false,
                    cfg.epochs,
                    cfg.batch_size,
                    cfg.sgd,
                    &mut rng,
                )?;
            }
            Scheme::FedProx => {
                fedprox_local(state, theta_global, cfg.prox_mu, cfg, master_seed, round)?;
            }
            _ => unreachable!("validated above"),
        }
        updates.push(ClientUpdate {
            client_id: cid,
            theta_l: state.theta_l.clone(),
            selected: crate::clustering::SelectedSet {
                client_id: cid,
                entries: Vec::new(),
                per_cluster: Vec::new(),
            },
            n_i: state.dataset.n(),
        });
    }
    if updates.is_empty() {
        return Ok((theta_global.clone(), Vec::new()));
    }
    let contributed: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
    let theta = aggregate(&updates)?;
    Ok((theta, contributed))
}

/// FedAvg convenience wrapper around [`baseline_round`].
pub fn fedavg_round(
    clients: &mut [ClientState],
    connected: &[usize],
    theta_global: &ModelParams,
    cfg: &BaselineConfig,
    master_seed: u64,
    round: usize,
) -> Result<(ModelParams, Vec<usize>)> {
    let cfg = BaselineConfig {
        scheme: Scheme::FedAvg,
        ..cfg.clone()
    };
    baseline_round(clients, connected, theta_global, &cfg, master_seed, round)
}

/// Isolated training: one long CE run on the client's own originals, no
/// communication. Uses round 0 of the shared client batch stream.
pub fn solo_train(state: &mut ClientState, cfg: &BaselineConfig, master_seed: u64) -> Result<()> {
    let mut rng = derive_rng(master_seed, 0, state.client_id as u64, StreamKind::LocalBatches);
    train_ce(
        &mut state.theta_l,
        &state.dataset.samples,
        false,
        cfg.solo_epochs,
        cfg.batch_size,
        cfg.sgd,
        &mut rng,
    )
}
