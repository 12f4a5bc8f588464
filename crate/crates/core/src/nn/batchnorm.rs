use alloc::format;
use alloc::vec::Vec;

use super::{Mode, ParamId, ParamKind, ParamStore, Pass};
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation with affine parameters and running
/// statistics. The running variance tracks the unbiased batch variance.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(shape, 1.0), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(shape, 1.0), ParamKind::Buffer),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn reset_parameters(&self, store: &mut ParamStore) {
        store.get_mut(self.gamma).data_mut().fill(1.0);
        store.get_mut(self.beta).data_mut().fill(0.0);
        store.get_mut(self.running_mean).data_mut().fill(0.0);
        store.get_mut(self.running_var).data_mut().fill(1.0);
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let s = p.graph.shape(x);
        if s.c() != self.channels {
            return Err(Error::dim(
                "batchnorm_forward",
                format!("input has {} channels, layer expects {}", s.c(), self.channels),
            ));
        }
        let normalized = match p.mode {
            Mode::Train => {
                let (xhat, mean, var) = p.graph.batch_norm(x, self.eps)?;
                let count = s.n() * s.h() * s.w();
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                let m = self.momentum;
                for (r, v) in p.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in p.store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * v * unbias;
                }
                xhat
            }
            Mode::Eval => {
                let mean = p.store.get(self.running_mean).clone();
                let inv: Vec<f64> = p
                    .store
                    .get(self.running_var)
                    .data()
                    .iter()
                    .map(|v| 1.0 / libm::sqrt(v + self.eps))
                    .collect();
                let mean = p.graph.constant(mean);
                let inv = p.graph.constant(Tensor::new([1, self.channels, 1, 1], inv)?);
                let centred = p.graph.sub(x, mean)?;
                p.graph.mul(centred, inv)?
            }
        };
        let gamma = p.param(self.gamma);
        let beta = p.param(self.beta);
        let scaled = p.graph.mul(normalized, gamma)?;
        p.graph.add(scaled, beta)
    }
}
