//! Adam with a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::numcore::{Gradients, Tensor};
use crate::params::{Bound, ParamStore};

/// `lr0 · ½(1 + cos(π t / T))`; `lr0` when `T = 0`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// Gradients of the bound parameters, keyed by name. Parameters that did not
/// take part in the loss are absent.
pub fn named_grads(bound: &Bound, grads: &Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// Adds `src` into `acc` name by name.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (k, g) in src {
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
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
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *x -= lr * update;
            }
        }
    }
}
