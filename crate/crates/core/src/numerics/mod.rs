//! Dense f64 tensors, a reverse-mode autodiff tape, and SGD with momentum.
//!
//! Every training loop in the crate is built on this module. The primitive
//! set is deliberately small: matmul, dense-layer broadcasting, a 2-D
//! convolution, 2x2 mean pooling, elementwise arithmetic, ReLU, a fused
//! softmax cross-entropy, means, L2 row norms, cosine similarity, and
//! log-sum-exp — a closed set covering every objective the protocol needs.

mod sgd;
mod tape;
mod tensor;

pub use sgd::{sgd_step, SgdHyper, SgdState};
pub use tape::{finite_diff_gradients, Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
