use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Scalar;
use crate::error::{state_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Adam with coupled (L2) weight decay: `wd·θ` is added to the gradient
/// before the moment updates.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub step_count: u64,
    pub config: AdamConfig,
    pub(crate) m: Vec<Vec<F>>,
    pub(crate) v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| vec![F::zero(); p.value.numel()]).collect();
        AdamState { step_count: 0, config, m: zeros(), v: zeros() }
    }

    pub fn first_moment(&self, index: usize) -> &[F] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[F] {
        &self.v[index]
    }

    /// One bias-corrected update of every trainable parameter, then zeroes
    /// their gradients. Frozen parameters and their moments are untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(state_err!(
                "optimizer tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            ));
        }
        for p in store.iter() {
            if p.trainable && p.grad.is_none() {
                return Err(state_err!("trainable parameter `{}` has no gradient", p.name));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (lr, eps, wd) = (F::lit(c.lr), F::lit(c.eps), F::lit(c.weight_decay));
        let one = F::one();
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_mut().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, g), m), v) in p.value.data_mut().iter_mut().zip(grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let ge = *g + wd * *theta;
                *m = b1 * *m + (one - b1) * ge;
                *v = b2 * *v + (one - b2) * ge * ge;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
                *g = F::zero();
            }
        }
        Ok(())
    }
}
