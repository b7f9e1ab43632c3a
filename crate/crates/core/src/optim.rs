//! AdamW with decoupled weight decay and a linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    /// Fraction of the planned steps over which the rate ramps up from 0.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 2e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::config("learning_rate, weight_decay must be >= 0 and epsilon > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Step counter, schedule and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: usize,
    total_steps: usize,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let zeros = |s: &ParamStore<T>| -> Vec<Vec<T>> {
            s.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect()
        };
        Ok(OptimizerState {
            config,
            step: 0,
            total_steps,
            first: zeros(store),
            second: zeros(store),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Learning rate in effect at update number `step` (1-based): linear from
    /// 0 over the warmup window, constant afterwards.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = self.config.warmup_fraction * self.total_steps as f64;
        if warmup > 0.0 && (step as f64) < warmup {
            self.config.learning_rate * step as f64 / warmup
        } else {
            self.config.learning_rate
        }
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.second[index]
    }

    /// Applies one update to every parameter that carries a gradient;
    /// parameters without one are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.step >= self.total_steps {
            return Err(Error::contract(format!(
                "optimizer already took all {} planned steps",
                self.total_steps
            )));
        }
        if store.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, registry has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().enumerate() {
            if p.tensor.len() != self.first[i].len() {
                return Err(Error::contract(format!(
                    "moment buffer for `{}` has {} elements, parameter has {}",
                    p.name,
                    self.first[i].len(),
                    p.tensor.len()
                )));
            }
        }

        let t = self.step + 1;
        let c = &self.config;
        let lr = self.learning_rate_at(t);
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(t as i32));
        let eps = T::lit(c.epsilon);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let apply_decay = store.param(id).decay;
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, x) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                if apply_decay {
                    *x *= decay;
                }
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }
}
