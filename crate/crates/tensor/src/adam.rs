use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tape::ParamGrads;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay · w` (L2 form).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |id: ParamId| {
            let t = store.get(id);
            Tensor::zeros(t.rows(), t.cols())
        };
        Self {
            config,
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    /// One Adam update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                msg: format!(
                    "state tracks {} parameters, store has {}",
                    self.first.len(),
                    store.len()
                ),
            });
        }
        for (&id, g) in &grads.0 {
            if store.get(id).shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (&id, g) in &grads.0 {
            let w = store.get_mut(id).data_mut();
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] + weight_decay * w[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![0.3, -1.2]).unwrap());
        let before = store.clone();
        let mut adam = AdamState::new(
            &store,
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        );
        let mut grads = ParamGrads::default();
        grads.0.insert(id, Tensor::zeros(1, 2));
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!(c.lr, 2e-4);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn one_step_on_square_decreases() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let f = |s: &ParamStore| s.get(id).data()[0].powi(2);
        let before = f(&store);
        let grads = {
            let mut tape = Tape::with_params(&store);
            let w = tape.param(id).unwrap();
            let sq = tape.mul(w, w).unwrap();
            let l = tape.sum(sq).unwrap();
            tape.backward(l).unwrap().into_param_grads()
        };
        adam.step(&mut store, &grads).unwrap();
        assert!(f(&store) < before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(2, 2));
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::default();
        grads.0.insert(id, Tensor::zeros(1, 4));
        assert!(adam.step(&mut store, &grads).is_err());
        assert_eq!(adam.step, 0);
    }
}
