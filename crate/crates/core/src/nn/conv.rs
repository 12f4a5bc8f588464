use alloc::format;
use alloc::vec;

use super::init::{kaiming_uniform, InitRng};
use super::{ParamId, ParamKind, ParamStore, Pass};
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// `k×k` convolution with bias and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut InitRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::zeros([out_ch, in_ch, kernel, kernel]),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_ch, 1, 1]), ParamKind::Trainable);
        let conv = Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        };
        conv.reset_parameters(store, rng);
        conv
    }

    /// "Same" convolution: stride 1, padding `(k - 1) / 2`.
    pub fn same(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut InitRng) -> Self {
        Self::new(store, name, in_ch, out_ch, kernel, 1, (kernel - 1) / 2, rng)
    }

    /// Kaiming-uniform weights over the fan-in, zero bias.
    pub fn reset_parameters(&self, store: &mut ParamStore, rng: &mut InitRng) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let w = kaiming_uniform(rng, fan_in, self.out_ch * fan_in);
        store.get_mut(self.weight).data_mut().copy_from_slice(&w);
        store.get_mut(self.bias).data_mut().copy_from_slice(&vec![0.0; self.out_ch]);
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let c = p.graph.shape(x).c();
        if c != self.in_ch {
            return Err(Error::dim(
                "conv2d_forward",
                format!("input has {} channels, layer expects {}", c, self.in_ch),
            ));
        }
        let w = p.param(self.weight);
        let b = p.param(self.bias);
        p.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}
