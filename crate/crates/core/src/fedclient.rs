//! One client's per-round behavior: train the personalized model on
//! originals, compute pseudo-labels with the broadcast global model, train
//! the local model on pixelized images with the combined objective, refresh
//! centroids with the trained local model, select representative images,
//! and emit an update when chosen.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    kmeans, kmeans_warm, select_representatives, Centroids, PseudoLabels, SelectedSet,
    SelectionScope, KMEANS_MAX_ITERS, KMEANS_TOL,
};
use crate::dataio::{ClientDataset, Image, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{self, ModelParams};
use crate::numerics::{sgd_step, NodeId, SgdHyper, SgdState, Tape, Tensor};
use crate::seeding::{derive_rng, derive_seed, StreamKind};

/// Per-round client configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClientRoundConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdHyper,
    pub loss_weights: LossWeights,
    /// Representatives per cluster.
    pub m: usize,
    pub selection_scope: SelectionScope,
    /// Keep the personalized model across rounds instead of re-initializing
    /// it from the broadcast weights.
    pub persist_personalized: bool,
}

impl Default for ClientRoundConfig {
    fn default() -> Self {
        ClientRoundConfig {
            local_epochs: 5,
            batch_size: 32,
            sgd: SgdHyper::default(),
            loss_weights: LossWeights::default(),
            m: 2,
            selection_scope: SelectionScope::ClusterMembers,
            persist_personalized: false,
        }
    }
}

/// A client's persistent state between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub dataset: ClientDataset,
    /// Personalized model (trained on originals; the distillation teacher).
    pub theta_p: ModelParams,
    /// Local model (trained on pixelized images; the uploaded weights).
    pub theta_l: ModelParams,
}

/// The round protocol message a chosen client uploads.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub theta_l: ModelParams,
    pub selected: SelectedSet,
    pub n_i: usize,
}

/// Loss components of the first local-training batch; used to audit the
/// combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LocalLossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub con: Option<f64>,
    pub kd: Option<f64>,
    pub cl: Option<f64>,
}

fn images_of<'a>(samples: &'a [Sample], idx: &[usize], use_pixelized: bool) -> Result<Vec<&'a Image>> {
    idx.iter()
        .map(|&i| {
            if use_pixelized {
                samples[i]
                    .z
                    .as_ref()
                    .ok_or(Error::invalid("sample has no pixelized image"))
            } else {
                Ok(&samples[i].x)
            }
        })
        .collect()
}

/// Minibatch SGD on plain cross-entropy. Shared by personalized training,
/// the FedAvg/SOLO baselines, and server fine-tuning.
pub fn train_ce(
    model: &mut ModelParams,
    samples: &[Sample],
    use_pixelized: bool,
    epochs: usize,
    batch_size: usize,
    hyper: SgdHyper,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut state = SgdState::for_params(hyper, model.tensors());
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let images = images_of(samples, chunk, use_pixelized)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].y).collect();
            let mut tape = Tape::new();
            let graph = model::forward_batch(&mut tape, model, &images)?;
            let loss = tape.softmax_cross_entropy_mean(graph.logits, &labels)?;
            apply_step(model, &tape, &graph.params, loss, &mut state)?;
        }
    }
    Ok(())
}

/// Minibatch SGD on CE plus the FedProx proximal term
/// (mu/2) * ||theta - theta_global||^2.
#[allow(clippy::too_many_arguments)]
pub fn train_prox(
    model: &mut ModelParams,
    global: &ModelParams,
    samples: &[Sample],
    prox_mu: f64,
    epochs: usize,
    batch_size: usize,
    hyper: SgdHyper,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if prox_mu < 0.0 {
        return Err(Error::invalid("prox_mu must be non-negative"));
    }
    let mut state = SgdState::for_params(hyper, model.tensors());
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let images = images_of(samples, chunk, false)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].y).collect();
            let mut tape = Tape::new();
            let graph = model::forward_batch(&mut tape, model, &images)?;
            let ce = tape.softmax_cross_entropy_mean(graph.logits, &labels)?;
            let total = if prox_mu == 0.0 {
                ce
            } else {
                let mut prox: Option<NodeId> = None;
                for (&pid, gt) in graph.params.iter().zip(global.tensors().iter()) {
                    let g = tape.constant(gt.clone());
                    let diff = tape.sub(pid, g)?;
                    let ssq = tape.sum_squares(diff)?;
                    prox = Some(match prox {
                        None => ssq,
                        Some(acc) => tape.add(acc, ssq)?,
                    });
                }
                let prox = tape.scale(prox.expect("at least one tensor"), prox_mu / 2.0)?;
                tape.add(ce, prox)?
            };
            apply_step(model, &tape, &graph.params, total, &mut state)?;
        }
    }
    Ok(())
}

/// Minibatch SGD on the combined local objective
/// CE(z) + l1*contrastive(z, x) + l2*kd(z, teacher(x)) + l3*clustering(z).
///
/// The teacher's embeddings enter the tape as constants, so no gradient can
/// reach the personalized model. Batches of size 1 skip the contrastive and
/// distillation terms (they need in-batch negatives); CE and clustering
/// still apply. Returns the first batch's loss breakdown.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    model: &mut ModelParams,
    teacher: &ModelParams,
    samples: &[Sample],
    centroids: &Centroids,
    pseudo_labels: &PseudoLabels,
    weights: &LossWeights,
    epochs: usize,
    batch_size: usize,
    hyper: SgdHyper,
    rng: &mut ChaCha8Rng,
) -> Result<Option<LocalLossBreakdown>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    if pseudo_labels.len() != samples.len() {
        return Err(Error::invalid("one pseudo-label per sample required"));
    }
    weights.validate()?;
    let mut state = SgdState::for_params(hyper, model.tensors());
    let mut first_batch = None;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            let z_images = images_of(samples, chunk, true)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].y).collect();
            let batch_pseudo: Vec<usize> = chunk.iter().map(|&i| pseudo_labels[i]).collect();

            let mut tape = Tape::new();
            let z_node = tape.constant(model::batch_tensor(&model.arch, &z_images)?);
            let param_ids = model::register_params(&mut tape, model);
            let (emb_z, logits_z) = model::forward_graph(&mut tape, &model.arch, &param_ids, z_node)?;
            let ce = tape.softmax_cross_entropy_mean(logits_z, &labels)?;

            let pair_terms = b >= 2;
            let con = if weights.lambda1 != 0.0 && pair_terms {
                let x_images = images_of(samples, chunk, false)?;
                let x_node = tape.constant(model::batch_tensor(&model.arch, &x_images)?);
                let (emb_x, _) = model::forward_graph(&mut tape, &model.arch, &param_ids, x_node)?;
                Some(losses::contrastive_batch(&mut tape, emb_z, emb_x, weights.tau)?)
            } else {
                None
            };
            let kd = if weights.lambda2 != 0.0 && pair_terms {
                let x_images = images_of(samples, chunk, false)?;
                let teacher_emb = model::embeddings(teacher, &x_images)?;
                let t_node = tape.constant(Tensor::from_rows(&teacher_emb)?);
                Some(losses::kd_batch(&mut tape, emb_z, t_node, weights.tau)?)
            } else {
                None
            };
            let cl = if weights.lambda3 != 0.0 {
                Some(losses::clustering_loss(&mut tape, emb_z, &batch_pseudo, centroids)?)
            } else {
                None
            };
            let total = losses::local_total(&mut tape, ce, con, kd, cl, weights)?;
            if first_batch.is_none() {
                first_batch = Some(LocalLossBreakdown {
                    total: tape.scalar_value(total),
                    ce: tape.scalar_value(ce),
                    con: con.map(|n| tape.scalar_value(n)),
                    kd: kd.map(|n| tape.scalar_value(n)),
                    cl: cl.map(|n| tape.scalar_value(n)),
                });
            }
            apply_step(model, &tape, &param_ids, total, &mut state)?;
        }
    }
    Ok(first_batch)
}

fn apply_step(
    model: &mut ModelParams,
    tape: &Tape,
    param_ids: &[NodeId],
    loss: NodeId,
    state: &mut SgdState,
) -> Result<()> {
    let grads = tape.backward(loss)?;
    let gvec: Vec<Tensor> = param_ids.iter().map(|&id| grads.of(id).clone()).collect();
    sgd_step(model.tensors_mut(), &gvec, state)
}

fn pixelized_images(dataset: &ClientDataset) -> Result<Vec<&Image>> {
    dataset
        .samples
        .iter()
        .map(|s| s.z.as_ref().ok_or(Error::invalid("sample has no pixelized image")))
        .collect()
}

impl ClientState {
    pub fn new(client_id: usize, dataset: ClientDataset, init: &ModelParams) -> Self {
        ClientState {
            client_id,
            dataset,
            theta_p: init.clone(),
            theta_l: init.clone(),
        }
    }

    /// Personalized-model training pass (plain CE on originals).
    pub fn train_personalized(
        &mut self,
        cfg: &ClientRoundConfig,
        master_seed: u64,
        round: usize,
    ) -> Result<()> {
        let mut rng = derive_rng(
            master_seed,
            round as u64,
            self.client_id as u64,
            StreamKind::PersonalizedBatches,
        );
        train_ce(
            &mut self.theta_p,
            &self.dataset.samples,
            false,
            cfg.local_epochs,
            cfg.batch_size,
            cfg.sgd,
            &mut rng,
        )
    }

    /// Embeddings of all pixelized images under the global model, then
    /// k-means with k = |C_i| (classes present locally).
    pub fn compute_pseudo_labels(
        &self,
        theta_global: &ModelParams,
        master_seed: u64,
        round: usize,
    ) -> Result<(Centroids, PseudoLabels)> {
        let z_images = pixelized_images(&self.dataset)?;
        let embeddings = model::embeddings(theta_global, &z_images)?;
        let k = self.dataset.classes_present.len().max(1);
        let seed = derive_seed(
            master_seed,
            round as u64,
            self.client_id as u64,
            StreamKind::PseudoLabelKmeans,
        );
        let result = kmeans(&embeddings, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;
        Ok((result.centroids, result.labels))
    }

    /// Run one full round of local work. Returns an update only when the
    /// client is in the contribution set; models are refreshed either way.
    pub fn client_round(
        &mut self,
        theta_global: &ModelParams,
        cfg: &ClientRoundConfig,
        master_seed: u64,
        round: usize,
        in_contribution: bool,
    ) -> Result<Option<ClientUpdate>> {
        if self.dataset.samples.is_empty() {
            return Ok(None);
        }
        // Broadcast weights initialize both models each round; the
        // personalized model may persist across rounds when configured.
        if !cfg.persist_personalized {
            self.theta_p = theta_global.clone();
        }
        self.theta_l = theta_global.clone();

        self.train_personalized(cfg, master_seed, round)?;
        let (centroids, pseudo) = self.compute_pseudo_labels(theta_global, master_seed, round)?;

        let mut rng_local = derive_rng(
            master_seed,
            round as u64,
            self.client_id as u64,
            StreamKind::LocalBatches,
        );
        train_local(
            &mut self.theta_l,
            &self.theta_p,
            &self.dataset.samples,
            &centroids,
            &pseudo,
            &cfg.loss_weights,
            cfg.local_epochs,
            cfg.batch_size,
            cfg.sgd,
            &mut rng_local,
        )?;

        // Centroid refresh on local-model embeddings, warm-started from the
        // pseudo-label centroids and run to convergence.
        let z_images = pixelized_images(&self.dataset)?;
        let local_embeddings = model::embeddings(&self.theta_l, &z_images)?;
        let refreshed = kmeans_warm(&local_embeddings, &centroids, KMEANS_MAX_ITERS, KMEANS_TOL)?;

        let selected = select_representatives(
            &local_embeddings,
            &self.dataset.samples,
            &refreshed.centroids,
            &refreshed.labels,
            cfg.m,
            cfg.selection_scope,
            self.client_id,
        )?;

        if in_contribution {
            Ok(Some(ClientUpdate {
                client_id: self.client_id,
                theta_l: self.theta_l.clone(),
                selected,
                n_i: self.dataset.n(),
            }))
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{client_datasets, dirichlet_partition, synth_generate, PartitionSpec};
    use crate::model::{accuracy, init, ArchConfig};
    use crate::privacy::{pixelize, PixelizeConfig, PixelizeMode};

    fn fixture_sized(samples_per_class: usize, noise: f64, factor: usize) -> ClientDataset {
        let ds = synth_generate(4, samples_per_class, 16, noise, 21).unwrap();
        let cfg = PixelizeConfig {
            factor,
            mode: PixelizeMode::RegionOnly,
        };
        let samples: Vec<Sample> = ds
            .samples
            .iter()
            .map(|s| Sample {
                x: s.x.clone(),
                z: Some(pixelize(&s.x, &cfg).unwrap()),
                y: s.y,
            })
            .collect();
        ClientDataset::new(0, samples)
    }

    fn fixture(noise: f64, factor: usize) -> ClientDataset {
        fixture_sized(12, noise, factor)
    }

    fn desk_model(seed: u64) -> ModelParams {
        init(seed, &ArchConfig::desk(16, 4)).unwrap()
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged() {
        let data = fixture(0.05, 8);
        let global = desk_model(3);
        let mut state = ClientState::new(0, data, &global);
        let cfg = ClientRoundConfig {
            sgd: SgdHyper {
                lr: 0.0,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            batch_size: 8,
            ..Default::default()
        };
        state.train_personalized(&cfg, 1, 1).unwrap();
        assert!(state.theta_p.bit_eq(&global));
    }

    #[test]
    fn personalized_training_fits_separable_fixture() {
        let data = fixture_sized(25, 0.0, 8);
        let global = desk_model(5);
        let mut state = ClientState::new(0, data, &global);
        let cfg = ClientRoundConfig {
            batch_size: 8,
            ..Default::default()
        };
        state.train_personalized(&cfg, 1, 1).unwrap();
        let acc = accuracy(&state.theta_p, &state.dataset.samples, false).unwrap();
        assert_eq!(acc, 1.0, "training accuracy {acc}");
    }

    #[test]
    fn personalized_training_is_deterministic() {
        let data = fixture(0.05, 8);
        let global = desk_model(7);
        let mut a = ClientState::new(2, data.clone(), &global);
        let mut b = ClientState::new(2, data, &global);
        let cfg = ClientRoundConfig {
            batch_size: 8,
            ..Default::default()
        };
        a.train_personalized(&cfg, 9, 1).unwrap();
        b.train_personalized(&cfg, 9, 1).unwrap();
        assert!(a.theta_p.bit_eq(&b.theta_p));
    }

    #[test]
    fn pseudo_labels_match_classes_up_to_permutation() {
        // Zero noise: every class collapses to one embedding point, so
        // k-means with k = 4 recovers the classes exactly.
        let data = fixture(0.0, 8);
        let global = desk_model(11);
        let state = ClientState::new(0, data, &global);
        let (centroids, labels) = state.compute_pseudo_labels(&global, 1, 1).unwrap();
        assert_eq!(centroids.len(), 4);
        let mut mapping = std::collections::BTreeMap::new();
        for (s, &l) in state.dataset.samples.iter().zip(labels.iter()) {
            let prev = mapping.insert(s.y, l);
            if let Some(prev) = prev {
                assert_eq!(prev, l, "class split across clusters");
            }
        }
        let distinct: std::collections::BTreeSet<usize> = mapping.values().cloned().collect();
        assert_eq!(distinct.len(), 4, "clusters not a permutation of classes");
    }

    #[test]
    fn single_class_client_gets_single_centroid_at_mean() {
        let data = fixture(0.05, 8);
        let only_zero: Vec<Sample> = data.samples.iter().filter(|s| s.y == 0).cloned().collect();
        let data = ClientDataset::new(1, only_zero);
        let global = desk_model(13);
        let state = ClientState::new(1, data, &global);
        let (centroids, labels) = state.compute_pseudo_labels(&global, 1, 1).unwrap();
        assert_eq!(centroids.len(), 1);
        assert!(labels.iter().all(|&l| l == 0));
        let z_images = pixelized_images(&state.dataset).unwrap();
        let emb = model::embeddings(&global, &z_images).unwrap();
        let dim = emb[0].len();
        for d in 0..dim {
            let mean: f64 = emb.iter().map(|e| e[d]).sum::<f64>() / emb.len() as f64;
            assert!((centroids.vectors[0][d] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lambdas_reduce_local_training_to_plain_ce() {
        let data = fixture(0.05, 1); // factor 1: z == x bit-for-bit
        let global = desk_model(17);
        let weights = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Default::default()
        };
        let centroids = Centroids::new(vec![vec![0.0; 32]]);
        let pseudo = vec![0usize; data.samples.len()];

        let mut by_local = global.clone();
        let mut rng = derive_rng(1, 1, 0, StreamKind::LocalBatches);
        train_local(
            &mut by_local,
            &global,
            &data.samples,
            &centroids,
            &pseudo,
            &weights,
            2,
            8,
            SgdHyper::default(),
            &mut rng,
        )
        .unwrap();

        let mut by_ce = global.clone();
        let mut rng = derive_rng(1, 1, 0, StreamKind::LocalBatches);
        train_ce(
            &mut by_ce,
            &data.samples,
            false,
            2,
            8,
            SgdHyper::default(),
            &mut rng,
        )
        .unwrap();
        assert!(by_local.bit_eq(&by_ce));
    }

    #[test]
    fn first_batch_loss_is_the_weighted_component_sum() {
        let data = fixture(0.08, 8);
        let global = desk_model(19);
        let mut state = ClientState::new(0, data, &global);
        let cfg = ClientRoundConfig {
            batch_size: 8,
            ..Default::default()
        };
        state.train_personalized(&cfg, 4, 1).unwrap();
        let (centroids, pseudo) = state.compute_pseudo_labels(&global, 4, 1).unwrap();
        let mut rng = derive_rng(4, 1, 0, StreamKind::LocalBatches);
        let breakdown = train_local(
            &mut state.theta_l,
            &state.theta_p,
            &state.dataset.samples,
            &centroids,
            &pseudo,
            &cfg.loss_weights,
            1,
            8,
            cfg.sgd,
            &mut rng,
        )
        .unwrap()
        .expect("at least one batch");
        let w = cfg.loss_weights;
        let hand = breakdown.ce
            + w.lambda1 * breakdown.con.unwrap()
            + w.lambda2 * breakdown.kd.unwrap()
            + w.lambda3 * breakdown.cl.unwrap();
        assert!((breakdown.total - hand).abs() < 1e-12);
        assert!(breakdown.total.is_finite() && breakdown.total > 0.0);
    }

    #[test]
    fn full_round_freezes_teacher_and_bounds_selection() {
        let data = fixture(0.08, 8);
        let global = desk_model(23);
        let mut state = ClientState::new(0, data, &global);
        let cfg = ClientRoundConfig {
            batch_size: 8,
            m: 2,
            ..Default::default()
        };
        let update = state.client_round(&global, &cfg, 6, 1, true).unwrap().unwrap();

        // Teacher frozen during local training: re-run personalized
        // training alone and compare bits.
        let mut reference = ClientState::new(0, state.dataset.clone(), &global);
        reference.train_personalized(&cfg, 6, 1).unwrap();
        assert!(state.theta_p.bit_eq(&reference.theta_p));

        // Counting bound and pixelized-only contents.
        let k = state.dataset.classes_present.len();
        assert!(update.selected.len() <= k * cfg.m);
        for entry in &update.selected.entries {
            let source = &state.dataset.samples[entry.sample_index];
            assert_eq!(entry.image, *source.z.as_ref().unwrap());
            assert_ne!(entry.image.pixels, source.x.pixels, "selected an original image");
        }
        assert_eq!(update.n_i, state.dataset.n());
    }

    #[test]
    fn unchosen_client_still_refreshes_models() {
        let data = fixture(0.08, 8);
        let global = desk_model(29);
        let mut state = ClientState::new(3, data, &global);
        let cfg = ClientRoundConfig {
            batch_size: 8,
            ..Default::default()
        };
        let update = state.client_round(&global, &cfg, 6, 1, false).unwrap();
        assert!(update.is_none());
        assert!(!state.theta_l.bit_eq(&global), "local model was not trained");
        assert!(!state.theta_p.bit_eq(&global), "personalized model was not trained");
    }

    #[test]
    fn saturating_m_selects_the_whole_dataset() {
        let data = fixture(0.08, 8);
        let n = data.n();
        let global = desk_model(31);
        let mut state = ClientState::new(0, data, &global);
        let cfg = ClientRoundConfig {
            batch_size: 8,
            m: 1000,
            ..Default::default()
        };
        let update = state.client_round(&global, &cfg, 2, 1, true).unwrap().unwrap();
        assert_eq!(update.selected.len(), n);
    }

    #[test]
    fn client_round_is_deterministic() {
        let ds = synth_generate(4, 30, 16, 0.08, 40).unwrap();
        let assignment = dirichlet_partition(
            &ds.labels(),
            &PartitionSpec {
                num_clients: 4,
                alpha: 0.5,
                seed: 2,
            },
        )
        .unwrap();
        let cfg = PixelizeConfig::default();
        let mut shards = client_datasets(&ds, &assignment, 4);
        for shard in &mut shards {
            for s in &mut shard.samples {
                s.z = Some(pixelize(&s.x, &cfg).unwrap());
            }
        }
        let global = desk_model(41);
        let round_cfg = ClientRoundConfig {
            batch_size: 8,
            ..Default::default()
        };
        let mut a = ClientState::new(1, shards[1].clone(), &global);
        let mut b = ClientState::new(1, shards[1].clone(), &global);
        let ua = a.client_round(&global, &round_cfg, 12, 3, true).unwrap().unwrap();
        let ub = b.client_round(&global, &round_cfg, 12, 3, true).unwrap().unwrap();
        assert!(ua.theta_l.bit_eq(&ub.theta_l));
        assert_eq!(ua.selected.entries.len(), ub.selected.entries.len());
        for (ea, eb) in ua.selected.entries.iter().zip(ub.selected.entries.iter()) {
            assert_eq!(ea, eb);
        }
    }
}
