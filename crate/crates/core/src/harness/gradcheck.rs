//! Gradient self-test: random small networks with every loss head, checked
//! against central finite differences.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::Centroids;
use crate::error::Result;
use crate::losses::{self, LossWeights};
use crate::numerics::{finite_diff_gradients, NodeId, Tape, Tensor};

const EPS: f64 = 1e-5;
const SKIP_BELOW: f64 = 1e-6;

/// Which objective sits on top of the network; cycles across cases so every
/// loss in the crate gets exercised.
#[derive(Clone, Copy)]
enum Head {
    CrossEntropyBatch,
    CrossEntropySingle,
    Cosine,
    Contrastive,
    Distillation,
    Clustering,
    CombinedLocal,
}

const HEADS: [Head; 7] = [
    Head::CrossEntropyBatch,
    Head::CrossEntropySingle,
    Head::Cosine,
    Head::Contrastive,
    Head::Distillation,
    Head::Clustering,
    Head::CombinedLocal,
];

struct Case {
    params: Vec<Tensor>,
    input_a: Tensor,
    input_b: Tensor,
    conv: bool,
    head: Head,
    labels: Vec<usize>,
    centroids: Centroids,
    teacher_rows: Vec<Vec<f64>>,
    cosine_ref: Vec<f64>,
}

fn rand_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn build_case(index: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9 ^ index as u64);
    let head = HEADS[index % HEADS.len()];
    let batch = match head {
        Head::CrossEntropySingle | Head::Cosine => 1,
        _ => 3,
    };
    let out_dim = 4;
    let conv = index % 2 == 1;
    let (params, input_a, input_b) = if conv {
        // [B,1,8,8] -> conv 3x3 (2 ch) -> relu -> pool -> flatten 18 -> dense 4
        let params = vec![
            rand_tensor(vec![2, 1, 3, 3], 0.6, &mut rng),
            rand_tensor(vec![2], 0.2, &mut rng),
            rand_tensor(vec![18, out_dim], 0.6, &mut rng),
            rand_tensor(vec![out_dim], 0.2, &mut rng),
        ];
        (
            params,
            rand_tensor(vec![batch, 1, 8, 8], 1.0, &mut rng),
            rand_tensor(vec![batch, 1, 8, 8], 1.0, &mut rng),
        )
    } else {
        // [B,6] -> dense 5 -> relu -> dense 4
        let params = vec![
            rand_tensor(vec![6, 5], 0.8, &mut rng),
            rand_tensor(vec![5], 0.3, &mut rng),
            rand_tensor(vec![5, out_dim], 0.8, &mut rng),
            rand_tensor(vec![out_dim], 0.3, &mut rng),
        ];
        (
            params,
            rand_tensor(vec![batch, 6], 1.0, &mut rng),
            rand_tensor(vec![batch, 6], 1.0, &mut rng),
        )
    };
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..out_dim)).collect();
    let centroids = Centroids::new(
        (0..2)
            .map(|_| (0..out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
    );
    let teacher_rows: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..out_dim).map(|_| rng.gen_range(0.2..1.2)).collect())
        .collect();
    let cosine_ref: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(0.2..1.2)).collect();
    Case {
        params,
        input_a,
        input_b,
        conv,
        head,
        labels,
        centroids,
        teacher_rows,
        cosine_ref,
    }
}

fn forward_net(tape: &mut Tape, case: &Case, param_ids: &[NodeId], input: NodeId) -> Result<NodeId> {
    if case.conv {
        let h = tape.conv2d(input, param_ids[0], param_ids[1])?;
        let h = tape.relu(h)?;
        let h = tape.mean_pool2(h)?;
        let b = tape.value(h).shape()[0];
        let flat: usize = tape.value(h).numel() / b;
        let h = tape.reshape(h, vec![b, flat])?;
        let h = tape.matmul(h, param_ids[2])?;
        tape.add_row_bias(h, param_ids[3])
    } else {
        let h = tape.matmul(input, param_ids[0])?;
        let h = tape.add_row_bias(h, param_ids[1])?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, param_ids[2])?;
        tape.add_row_bias(h, param_ids[3])
    }
}

fn loss_of(case: &Case, params: &[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId)> {
    let mut tape = Tape::new();
    let input_a = tape.constant(case.input_a.clone());
    let param_ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out_a = forward_net(&mut tape, case, &param_ids, input_a)?;
    let loss = match case.head {
        Head::CrossEntropyBatch => losses::cross_entropy_batch(&mut tape, out_a, &case.labels)?,
        Head::CrossEntropySingle => losses::cross_entropy(&mut tape, out_a, case.labels[0])?,
        Head::Cosine => {
            let d = case.cosine_ref.len();
            let r = tape.constant(Tensor::new(vec![1, d], case.cosine_ref.clone())?);
            losses::cosine(&mut tape, out_a, r)?
        }
        Head::Contrastive => {
            let input_b = tape.constant(case.input_b.clone());
            let out_b = forward_net(&mut tape, case, &param_ids, input_b)?;
            losses::contrastive_batch(&mut tape, out_a, out_b, 0.5)?
        }
        Head::Distillation => {
            let t = tape.constant(Tensor::from_rows(&case.teacher_rows)?);
            losses::kd_batch(&mut tape, out_a, t, 0.5)?
        }
        Head::Clustering => {
            let assign: Vec<usize> = case.labels.iter().map(|&l| l % 2).collect();
            losses::clustering_loss(&mut tape, out_a, &assign, &case.centroids)?
        }
        Head::CombinedLocal => {
            let ce = losses::cross_entropy_batch(&mut tape, out_a, &case.labels)?;
            let input_b = tape.constant(case.input_b.clone());
            let out_b = forward_net(&mut tape, case, &param_ids, input_b)?;
            let con = losses::contrastive_batch(&mut tape, out_a, out_b, 0.5)?;
            let t = tape.constant(Tensor::from_rows(&case.teacher_rows)?);
            let kd = losses::kd_batch(&mut tape, out_a, t, 0.5)?;
            let assign: Vec<usize> = case.labels.iter().map(|&l| l % 2).collect();
            let cl = losses::clustering_loss(&mut tape, out_a, &assign, &case.centroids)?;
            losses::local_total(&mut tape, ce, Some(con), Some(kd), Some(cl), &LossWeights::default())?
        }
    };
    Ok((tape, param_ids, loss))
}

/// Run `networks` random cases; returns the worst relative error between
/// autodiff and central finite differences over all parameters.
pub fn gradcheck_suite(networks: usize) -> Result<f64> {
    let mut max_rel = 0.0f64;
    for index in 0..networks {
        let case = build_case(index);
        let (tape, param_ids, loss) = loss_of(&case, &case.params)?;
        let grads = tape.backward(loss)?;

        let eval = |ps: &[Tensor]| -> f64 {
            let (tape, _, loss) = loss_of(&case, ps).expect("case evaluates");
            tape.scalar_value(loss)
        };
        let fd = finite_diff_gradients(&eval, &case.params, EPS);
        for (id, fdg) in param_ids.iter().zip(fd.iter()) {
            for (&a, &b) in grads.of(*id).data().iter().zip(fdg.data().iter()) {
                let denom = a.abs().max(b.abs());
                if denom < SKIP_BELOW {
                    continue;
                }
                max_rel = max_rel.max((a - b).abs() / denom);
            }
        }
    }
    Ok(max_rel)
}
