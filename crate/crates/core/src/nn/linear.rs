use alloc::format;
use alloc::vec;

use super::init::{kaiming_uniform, InitRng};
use super::{ParamId, ParamKind, ParamStore, Pass};
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// Fully connected layer acting on the last axis: `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    /// `(1, 1, out_dim, in_dim)`
    pub weight: ParamId,
    /// `(1, 1, 1, out_dim)`
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut InitRng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::zeros([1, 1, out_dim, in_dim]),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, 1, 1, out_dim]), ParamKind::Trainable);
        let layer = Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        };
        layer.reset_parameters(store, rng);
        layer
    }

    pub fn reset_parameters(&self, store: &mut ParamStore, rng: &mut InitRng) {
        let w = kaiming_uniform(rng, self.in_dim, self.in_dim * self.out_dim);
        store.get_mut(self.weight).data_mut().copy_from_slice(&w);
        store.get_mut(self.bias).data_mut().copy_from_slice(&vec![0.0; self.out_dim]);
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let d = p.graph.shape(x).w();
        if d != self.in_dim {
            return Err(Error::dim(
                "linear_forward",
                format!("input length {} but layer expects {}", d, self.in_dim),
            ));
        }
        let w = p.param(self.weight);
        let b = p.param(self.bias);
        let wt = p.graph.transpose(w);
        let y = p.graph.matmul(x, wt)?;
        p.graph.add(y, b)
    }
}
