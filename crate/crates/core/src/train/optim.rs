use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub(crate) m: BTreeMap<String, Vec<f32>>,
    #[serde(skip)]
    pub(crate) v: BTreeMap<String, Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Zeroed moments for every parameter of `store`.
    pub fn for_store(store: &ParamStore<f32>) -> Self {
        let zeros = || -> BTreeMap<String, Vec<f32>> {
            store.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            ..Self::default()
        }
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// and their moments do not decay.
    pub fn update(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Internal(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                *w -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }
}
