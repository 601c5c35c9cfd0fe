//! SGD with momentum and weight decay.
//!
//! Update convention, fixed for the whole crate:
//!   v <- momentum * v + (grad + weight_decay * param)
//!   param <- param - lr * v

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(Error::invalid("lr must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity tensor per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub hyper: SgdHyper,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(hyper: SgdHyper, param_shapes: &[Vec<usize>]) -> Self {
        SgdState {
            hyper,
            velocity: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn for_params(hyper: SgdHyper, params: &[Tensor]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        SgdState::new(hyper, &shapes)
    }
}

/// One optimizer step over all parameter tensors, in place.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::invalid("param/grad/velocity count mismatch"));
    }
    let SgdHyper {
        lr,
        momentum,
        weight_decay,
    } = state.hyper;
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(state.velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let pv = p.data_mut();
        let gv = g.data();
        let vv = v.data_mut();
        for i in 0..pv.len() {
            vv[i] = momentum * vv[i] + (gv[i] + weight_decay * pv[i]);
            pv[i] -= lr * vv[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_step() {
        let hyper = SgdHyper {
            lr: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut params = vec![one(1.0)];
        let mut state = SgdState::for_params(hyper, &params);
        sgd_step(&mut params, &[one(1.0)], &mut state).unwrap();
        assert_eq!(params[0].scalar_value(), 0.99);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, w = 0.99; v2 = 0.9 + 1 = 1.9, w = 0.99 - 0.019 = 0.971
        let hyper = SgdHyper {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut params = vec![one(1.0)];
        let mut state = SgdState::for_params(hyper, &params);
        sgd_step(&mut params, &[one(1.0)], &mut state).unwrap();
        sgd_step(&mut params, &[one(1.0)], &mut state).unwrap();
        assert!((params[0].scalar_value() - 0.971).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let hyper = SgdHyper {
            lr: 0.01,
            momentum: 0.0,
            weight_decay: 1e-5,
        };
        let mut params = vec![one(1.0)];
        let mut state = SgdState::for_params(hyper, &params);
        sgd_step(&mut params, &[one(0.0)], &mut state).unwrap();
        assert!((params[0].scalar_value() - 0.9999999).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_zero_decay_is_plain_gradient_descent() {
        let hyper = SgdHyper {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap()];
        let grads = vec![Tensor::new(vec![3], vec![0.5, 1.0, -4.0]).unwrap()];
        let mut state = SgdState::for_params(hyper, &params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0].data(), &[0.75, -2.5, 2.25]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let hyper = SgdHyper::default();
        let mut params = vec![one(1.0)];
        let mut state = SgdState::for_params(hyper, &params);
        let bad = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        assert!(sgd_step(&mut params, &bad, &mut state).is_err());
    }
}
