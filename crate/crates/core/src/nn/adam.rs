use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ParamStore;
use crate::{Error, Result};

/// Learning rate after `epoch` completed epochs of multiplicative decay.
pub fn decayed_lr(base: f64, decay: f64, epoch: u32) -> f64 {
    base * libm::pow(decay, epoch as f64)
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `params` from `grads`, slice by slice. Moment buffers
    /// are sized on the first call and must keep matching afterwards.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} parameter tensors but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::dim("adam_step", "parameter count changed between steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("tensor {}: {} values, {} gradients, {} moments", i, p.len(), g.len(), self.m[i].len()),
                ));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }

    /// Updates every trainable tensor in the store from its gradient buffer;
    /// tensors without a gradient are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.trainable().collect();
        let grads: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                let t = store.get(*id);
                t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        let mut values: Vec<Vec<f64>> = ids.iter().map(|id| store.get(*id).data().to_vec()).collect();
        {
            let mut views: Vec<&mut [f64]> = values.iter_mut().map(|v| v.as_mut_slice()).collect();
            let grad_views: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            self.apply(&mut views, &grad_views)?;
        }
        for (id, v) in ids.into_iter().zip(values) {
            store.get_mut(id).data_mut().copy_from_slice(&v);
        }
        Ok(())
    }
}
