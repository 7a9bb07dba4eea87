use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step_count: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuild from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        step_count: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
        store: &ParamStore,
    ) -> Result<Self> {
        if first.len() != store.len() || second.len() != store.len() {
            return Err(TensorError::Contract {
                op: "adam",
                reason: format!(
                    "moment count {}/{} does not match {} parameters",
                    first.len(),
                    second.len(),
                    store.len()
                ),
            });
        }
        for ((m, v), p) in first.iter().zip(&second).zip(store.params()) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: m.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            step_count,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Apply one update from the gradients held in `store`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(bad) = store.params().iter().find(|p| !p.grad.is_finite()) {
            return Err(TensorError::NonFiniteGradient {
                name: bad.name.clone(),
            });
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for (((wi, gi), mi), vi) in w
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[1], vec![w]).unwrap(), true).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected both give 1 -> step = lr / (1 + eps).
        let (mut s, id) = scalar_store(0.0);
        s.param_mut(id).grad = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Oracle: plain loop of f(w) = w^2 with the same update rule at lr 0.1.
        let (mut s, id) = scalar_store(5.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s);
        for _ in 0..200 {
            let w = s.value(id).item();
            s.param_mut(id).grad = Tensor::new(&[1], vec![2.0 * w]).unwrap();
            adam.step(&mut s).unwrap();
        }
        assert!(s.value(id).item().abs() < 0.5);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(0.0);
        s.param_mut(id).grad = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.value(id).item(), 0.0);
    }
}
