//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tape::Grads;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments, indexed like the [`ParamStore`] they were built
/// for. Frozen parameters keep empty moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let (first, second) = store
            .iter()
            .map(|(_, p)| {
                let n = if p.trainable { p.array.len() } else { 0 };
                (vec![0.0; n], vec![0.0; n])
            })
            .unzip();
        OptimizerState {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// One AdamW update of every trainable parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer built for {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for id in store.trainable_ids() {
            if grads.get(id).is_none() {
                return Err(Error::State(format!(
                    "missing gradient for trainable parameter `{}`",
                    store.get(id).name
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.trainable_ids() {
            let g = grads.get(id).expect("checked above");
            let p = store.get_mut(id);
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            if m.len() != g.len() {
                return Err(Error::State(format!("moment shape mismatch for `{}`", p.name)));
            }
            for (((w, &gi), mi), vi) in p.array.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= c.lr * c.weight_decay * *w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
