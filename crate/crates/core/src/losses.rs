//! Scalar training objectives, recorded on the autodiff tape.
//!
//! All batch losses are means, not sums, so the combination weights are
//! independent of batch size. The contrastive and distillation losses share
//! one kernel: an InfoNCE over cosine similarities where row j's positive
//! sits on the diagonal and the other rows' entries act as in-batch
//! negatives.

use serde::{Deserialize, Serialize};

use crate::clustering::Centroids;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Combination weights of the local objective plus the shared temperature
/// and the FedProx proximal coefficient.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub prox_mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.05,
            tau: 0.5,
            prox_mu: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 || self.prox_mu < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Cross-entropy of a single logits vector against a class index.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, y: usize) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let k = *shape.last().ok_or(Error::invalid("scalar logits"))?;
    let row = if shape.len() == 1 {
        tape.reshape(logits, vec![1, k])?
    } else if shape == [1, k] {
        logits
    } else {
        return Err(Error::ShapeMismatch {
            expected: vec![1, k],
            got: shape,
        });
    };
    tape.softmax_cross_entropy_mean(row, &[y])
}

/// Mean cross-entropy of a [B, K] logits batch.
pub fn cross_entropy_batch(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    tape.softmax_cross_entropy_mean(logits, labels)
}

/// Cosine similarity of two vectors; zero vectors are rejected.
pub fn cosine(tape: &mut Tape, u: NodeId, v: NodeId) -> Result<NodeId> {
    let as_row = |tape: &mut Tape, id: NodeId| -> Result<NodeId> {
        let shape = tape.value(id).shape().to_vec();
        match shape.len() {
            1 => tape.reshape(id, vec![1, shape[0]]),
            2 if shape[0] == 1 => Ok(id),
            _ => Err(Error::ShapeMismatch {
                expected: vec![1, 0],
                got: shape,
            }),
        }
    };
    let u = as_row(tape, u)?;
    let v = as_row(tape, v)?;
    let m = tape.cosine_matrix(u, v)?;
    tape.reshape(m, vec![])
}

/// InfoNCE over in-batch negatives.
///
/// anchors and positives are [B, d] with B >= 2; row j of the similarity
/// matrix holds cos(anchor_j, positive_k) for all k, the diagonal being the
/// positive pair. Returns the mean over anchors of
/// -log softmax(similarities / tau)[j].
pub fn contrastive_batch(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let b = tape.value(anchors).shape()[0];
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    let sim = tape.cosine_matrix(anchors, positives)?;
    let scaled = tape.scale(sim, 1.0 / tau)?;
    let lse = tape.log_sum_exp_rows(scaled)?;
    let pos = tape.take_diag(scaled)?;
    let per_anchor = tape.sub(lse, pos)?;
    tape.mean(per_anchor)
}

/// Knowledge-distillation loss: the contrastive kernel with the teacher's
/// embeddings as positives/negatives. Callers pass the teacher batch as a
/// constant node so no gradient can reach the teacher.
pub fn kd_batch(tape: &mut Tape, anchors: NodeId, teachers: NodeId, tau: f64) -> Result<NodeId> {
    contrastive_batch(tape, anchors, teachers, tau)
}

/// Mean Euclidean distance from each embedding to its assigned centroid.
/// Centroids are constants: no gradient flows into them.
pub fn clustering_loss(
    tape: &mut Tape,
    embeddings: NodeId,
    pseudo_labels: &[usize],
    centroids: &Centroids,
) -> Result<NodeId> {
    let b = tape.value(embeddings).shape()[0];
    if pseudo_labels.len() != b {
        return Err(Error::invalid("one pseudo-label per sample required"));
    }
    if pseudo_labels.iter().any(|&l| l >= centroids.len()) {
        return Err(Error::invalid("pseudo-label references missing centroid"));
    }
    let table = Tensor::from_rows(&centroids.vectors)?;
    let diffs = tape.sub_rows_indexed(embeddings, table, pseudo_labels)?;
    let norms = tape.l2_norm_rows(diffs)?;
    tape.mean(norms)
}

/// Weighted combination L = ce + l1*con + l2*kd + l3*cl.
///
/// Zero-weighted or absent components are skipped structurally, so with all
/// lambdas zero the returned node IS the cross-entropy node.
pub fn local_total(
    tape: &mut Tape,
    ce: NodeId,
    con: Option<NodeId>,
    kd: Option<NodeId>,
    cl: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut total = ce;
    for (node, lambda) in [(con, w.lambda1), (kd, w.lambda2), (cl, w.lambda3)] {
        if let Some(node) = node {
            if lambda != 0.0 {
                let scaled = tape.scale(node, lambda)?;
                total = tape.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(data).unwrap()
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let ce = cross_entropy(&mut tape, logits, 2).unwrap();
        assert!((tape.scalar_value(ce) - 4.0f64.ln()).abs() < 1e-12);
        assert!((tape.scalar_value(ce) - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn peaked_logits_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![4], vec![10.0, 0.0, 0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, logits, 0).unwrap();
        let expect = (1.0 + 3.0 * (-10.0f64).exp()).ln();
        assert!((tape.scalar_value(ce) - expect).abs() < 1e-12);
        assert!((tape.scalar_value(ce) - 1.36e-4).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let raw = vec![1.3, -0.2, 0.8, 2.2];
        let shifted: Vec<f64> = raw.iter().map(|v| v + 57.0).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![4], raw).unwrap());
        let b = tape.constant(Tensor::new(vec![4], shifted).unwrap());
        let ca = cross_entropy(&mut tape, a, 1).unwrap();
        let cb = cross_entropy(&mut tape, b, 1).unwrap();
        assert!((tape.scalar_value(ca) - tape.scalar_value(cb)).abs() < 1e-9);
    }

    #[test]
    fn cosine_basics() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![2], vec![2.0, 1.0]).unwrap());
        let c = cosine(&mut tape, u, v).unwrap();
        assert!((tape.scalar_value(c) - 0.8).abs() < 1e-12);

        let same = cosine(&mut tape, u, u).unwrap();
        assert!((tape.scalar_value(same) - 1.0).abs() < 1e-12);

        let e1 = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let e2 = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let orth = cosine(&mut tape, e1, e2).unwrap();
        assert_eq!(tape.scalar_value(orth), 0.0);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(cosine(&mut tape, u, v).is_err());
    }

    #[test]
    fn contrastive_orthogonal_pair() {
        // B=2, cos(pos)=1, cos(neg)=0, tau=0.5 -> ln(1 + e^-2) per anchor.
        let mut tape = Tape::new();
        let anchors = tape.constant(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let positives = tape.constant(rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]));
        let loss = contrastive_batch(&mut tape, anchors, positives, 0.5).unwrap();
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
        assert!((tape.scalar_value(loss) - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn contrastive_identical_embeddings_is_ln_b() {
        for b in [2usize, 3, 5, 8] {
            let mut tape = Tape::new();
            let e: Vec<Vec<f64>> = (0..b).map(|_| vec![0.3, -0.7, 0.1]).collect();
            let anchors = tape.constant(rows(&e));
            let positives = tape.constant(rows(&e));
            let loss = contrastive_batch(&mut tape, anchors, positives, 0.5).unwrap();
            assert!((tape.scalar_value(loss) - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_batch_of_one_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(rows(&[vec![1.0, 0.0]]));
        assert!(contrastive_batch(&mut tape, a, a, 0.5).is_err());
    }

    #[test]
    fn contrastive_matches_naive_double_loop() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let b = 8;
        let d = 5;
        let tau = 0.37;
        let anchors: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let positives: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        // Naive oracle straight from the definition.
        let cos = |u: &[f64], v: &[f64]| -> f64 {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nu * nv)
        };
        let mut oracle = 0.0;
        for j in 0..b {
            let pos = (cos(&anchors[j], &positives[j]) / tau).exp();
            let mut denom = pos;
            for k in 0..b {
                if k != j {
                    denom += (cos(&anchors[j], &positives[k]) / tau).exp();
                }
            }
            oracle += -(pos / denom).ln();
        }
        oracle /= b as f64;

        let mut tape = Tape::new();
        let a = tape.constant(rows(&anchors));
        let p = tape.constant(rows(&positives));
        let loss = contrastive_batch(&mut tape, a, p, tau).unwrap();
        assert!((tape.scalar_value(loss) - oracle).abs() < 1e-10);
    }

    #[test]
    fn clustering_loss_examples() {
        // Every embedding at its centroid -> 0.
        let centroids = Centroids::new(vec![vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let mut tape = Tape::new();
        let emb = tape.constant(rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]));
        let l = clustering_loss(&mut tape, emb, &[0, 1], &centroids).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        // 1-D: embedding 3, centroid 1 -> distance 2.
        let centroids = Centroids::new(vec![vec![1.0]]);
        let mut tape = Tape::new();
        let emb = tape.constant(rows(&[vec![3.0]]));
        let l = clustering_loss(&mut tape, emb, &[0], &centroids).unwrap();
        assert_eq!(tape.scalar_value(l), 2.0);
    }

    #[test]
    fn clustering_loss_matches_loop_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let emb: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let cents: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..10).map(|_| rng.gen_range(0..3)).collect();
        let mut oracle = 0.0;
        for (e, &l) in emb.iter().zip(labels.iter()) {
            oracle += e
                .iter()
                .zip(cents[l].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
        oracle /= 10.0;
        let centroids = Centroids::new(cents);
        let mut tape = Tape::new();
        let emb_node = tape.constant(rows(&emb));
        let l = clustering_loss(&mut tape, emb_node, &labels, &centroids).unwrap();
        assert!((tape.scalar_value(l) - oracle).abs() < 1e-10);
    }

    #[test]
    fn clustering_loss_rejects_missing_centroid() {
        let centroids = Centroids::new(vec![vec![0.0]]);
        let mut tape = Tape::new();
        let emb = tape.constant(rows(&[vec![1.0]]));
        assert!(clustering_loss(&mut tape, emb, &[1], &centroids).is_err());
    }

    #[test]
    fn local_total_combines_and_reduces() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        // components (1,1,1,1) with (0.1, 0.1, 0.05) -> 1.25
        let total = local_total(&mut tape, one, Some(one), Some(one), Some(one), &w).unwrap();
        assert!((tape.scalar_value(total) - 1.25).abs() < 1e-12);

        // all lambdas zero -> the CE node itself
        let zero_w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..w
        };
        let total = local_total(&mut tape, one, Some(one), Some(one), Some(one), &zero_w).unwrap();
        assert_eq!(total, one);

        // linearity: doubling every component doubles the total
        let two = tape.constant(Tensor::scalar(2.0));
        let t2 = local_total(&mut tape, two, Some(two), Some(two), Some(two), &w).unwrap();
        assert!((tape.scalar_value(t2) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::numerics::finite_diff_gradients;
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let b = 4;
        let d = 3;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Tensor {
            Tensor::new(
                vec![b, d],
                (0..b * d).map(|_| rng.gen_range(0.2..1.5)).collect(),
            )
            .unwrap()
        };
        let anchors = mk(&mut rng);
        let positives = mk(&mut rng);
        let centroids = Centroids::new(vec![vec![0.1, -0.2, 0.4], vec![1.0, 0.3, -0.5]]);
        let labels = vec![0, 1, 1, 0];

        let build = |ps: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let a = tape.param(ps[0].clone());
            let p = tape.param(ps[1].clone());
            let con = contrastive_batch(&mut tape, a, p, 0.5).unwrap();
            let cl = clustering_loss(&mut tape, a, &labels, &centroids).unwrap();
            let ce = {
                let logits = tape.cosine_matrix(a, p).unwrap(); // any differentiable head
                cross_entropy_batch(&mut tape, logits, &[0, 1, 2, 0]).unwrap()
            };
            let total = local_total(
                &mut tape,
                ce,
                Some(con),
                None,
                Some(cl),
                &LossWeights::default(),
            )
            .unwrap();
            tape.scalar_value(total)
        };
        let params = vec![anchors.clone(), positives.clone()];
        let fd = finite_diff_gradients(&build, &params, 1e-5);

        let mut tape = Tape::new();
        let a = tape.param(anchors);
        let p = tape.param(positives);
        let con = contrastive_batch(&mut tape, a, p, 0.5).unwrap();
        let cl = clustering_loss(&mut tape, a, &labels, &centroids).unwrap();
        let logits = tape.cosine_matrix(a, p).unwrap();
        let ce = cross_entropy_batch(&mut tape, logits, &[0, 1, 2, 0]).unwrap();
        let total = local_total(
            &mut tape,
            ce,
            Some(con),
            None,
            Some(cl),
            &LossWeights::default(),
        )
        .unwrap();
        let grads = tape.backward(total).unwrap();
        for (id, fdg) in [(a, &fd[0]), (p, &fd[1])] {
            for (x, y) in grads.of(id).data().iter().zip(fdg.data().iter()) {
                let denom = x.abs().max(y.abs());
                if denom < 1e-6 {
                    continue;
                }
                assert!((x - y).abs() / denom < 1e-4, "ad {x} vs fd {y}");
            }
        }
    }
}
