//! Two-stream toy backbones and the stage shape contract they obey.
//!
//! Both encoders map an `(n, 3, H, W)` input to four feature maps at
//! strides 4, 8, 16 and 32. The depth stream is a plain convolutional
//! stack; the RGB stream uses overlapping patch embeddings followed by a
//! single-head self-attention block and an MLP block per stage.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::init::InitRng;
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamStore, Pass};
use crate::tensor::Var;
use crate::{Error, Result};

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Input size and per-stage channel widths of the two streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageContract {
    pub input_size: (usize, usize),
    pub rgb_channels: [usize; 4],
    pub depth_channels: [usize; 4],
}

impl StageContract {
    pub fn new(input_size: (usize, usize), rgb_channels: [usize; 4], depth_channels: [usize; 4]) -> Result<Self> {
        let c = StageContract {
            input_size,
            rgb_channels,
            depth_channels,
        };
        c.validate()?;
        Ok(c)
    }

    /// Toy widths `[16, 32, 64, 128]` for both streams.
    pub fn toy(input_size: (usize, usize)) -> Result<Self> {
        Self::new(input_size, [16, 32, 64, 128], [16, 32, 64, 128])
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_size(self.input_size.0, self.input_size.1)?;
        if self.rgb_channels.iter().chain(&self.depth_channels).any(|c| *c == 0) {
            return Err(Error::Contract("stage widths must be positive".into()));
        }
        Ok(())
    }

    pub fn check_size(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(Error::Contract(format!(
                "input size {h}x{w} is not a positive multiple of 32"
            )));
        }
        Ok(())
    }

    /// Spatial size of stage `i` (0-based).
    pub fn stage_size(&self, i: usize) -> (usize, usize) {
        (self.input_size.0 / STAGE_STRIDES[i], self.input_size.1 / STAGE_STRIDES[i])
    }
}

/// The four stage outputs of one stream, finest first.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub f: [Var; 4],
}

/// Checks that `input` has three channels and a contract-compatible size.
fn check_input(p: &Pass, x: Var, who: &str) -> Result<()> {
    let s = p.graph.shape(x);
    if s.c() != 3 {
        return Err(Error::dim(
            "encoder_forward",
            format!("{who} encoder expects 3 channels, got {}", s.c()),
        ));
    }
    StageContract::check_size(s.h(), s.w())
}

/// Conv → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut InitRng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, pad, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let y = self.conv.forward(p, x)?;
        let y = self.bn.forward(p, y)?;
        Ok(p.relu(y))
    }
}

/// Convolutional depth stream: a stride-4 stem, then two 3×3 blocks per
/// stage, the first of stages 2..4 striding by 2.
#[derive(Clone, Debug)]
pub struct DepthEncoder {
    pub stem: ConvBnRelu,
    pub blocks: Vec<[ConvBnRelu; 2]>,
}

impl DepthEncoder {
    pub fn new(store: &mut ParamStore, name: &str, widths: [usize; 4], rng: &mut InitRng) -> Self {
        let stem = ConvBnRelu::new(store, &format!("{name}.stem"), 3, widths[0], 7, 4, 3, rng);
        let mut blocks = Vec::with_capacity(4);
        for i in 0..4 {
            let (cin, stride) = if i == 0 { (widths[0], 1) } else { (widths[i - 1], 2) };
            let a = ConvBnRelu::new(store, &format!("{name}.stage{}.0", i + 1), cin, widths[i], 3, stride, 1, rng);
            let b = ConvBnRelu::new(store, &format!("{name}.stage{}.1", i + 1), widths[i], widths[i], 3, 1, 1, rng);
            blocks.push([a, b]);
        }
        DepthEncoder { stem, blocks }
    }

    pub fn forward(&self, p: &mut Pass, depth: Var) -> Result<StageFeatures> {
        check_input(p, depth, "depth")?;
        let mut x = self.stem.forward(p, depth)?;
        let mut f = [x; 4];
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            x = a.forward(p, x)?;
            x = b.forward(p, x)?;
            f[i] = x;
        }
        Ok(StageFeatures { f })
    }
}

/// `X + softmax(Q Kᵀ / √d) V` over tokens laid out as `(n, 1, T, d)`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut InitRng) -> Self {
        SelfAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            dim,
        }
    }

    /// Attention weights `(n, 1, T, T)`; every row sums to one.
    pub fn weights(&self, p: &mut Pass, tokens: Var) -> Result<Var> {
        let q = self.q.forward(p, tokens)?;
        let k = self.k.forward(p, tokens)?;
        let kt = p.graph.transpose(k);
        let scores = p.graph.matmul(q, kt)?;
        let scaled = p.graph.mul_scalar(scores, 1.0 / libm::sqrt(self.dim as f64));
        Ok(p.graph.softmax(scaled))
    }

    pub fn forward(&self, p: &mut Pass, tokens: Var) -> Result<Var> {
        let a = self.weights(p, tokens)?;
        let v = self.v.forward(p, tokens)?;
        let mixed = p.graph.matmul(a, v)?;
        p.graph.add(tokens, mixed)
    }
}

/// `X + W₂ ReLU(W₁ X)` with a hidden width of twice the token width.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut InitRng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 2 * dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * dim, dim, rng),
        }
    }

    pub fn forward(&self, p: &mut Pass, tokens: Var) -> Result<Var> {
        let h = self.fc1.forward(p, tokens)?;
        let h = p.relu(h);
        let y = self.fc2.forward(p, h)?;
        p.graph.add(tokens, y)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerStage {
    pub embed: Conv2d,
    pub embed_bn: BatchNorm2d,
    pub attn: SelfAttention,
    pub mlp: Mlp,
}

/// `(n, c, h, w) -> (n, 1, hw, c)`.
pub fn to_tokens(p: &mut Pass, x: Var) -> Result<Var> {
    let s = p.graph.shape(x);
    let flat = p.graph.reshape(x, [s.n(), 1, s.c(), s.h() * s.w()])?;
    Ok(p.graph.transpose(flat))
}

/// `(n, 1, hw, c) -> (n, c, h, w)`.
pub fn from_tokens(p: &mut Pass, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = p.graph.shape(t);
    let flat = p.graph.transpose(t);
    p.graph.reshape(flat, [s.n(), s.w(), h, w])
}

impl TransformerStage {
    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let e = self.embed.forward(p, x)?;
        let e = self.embed_bn.forward(p, e)?;
        let s = p.graph.shape(e);
        let t = to_tokens(p, e)?;
        let t = self.attn.forward(p, t)?;
        let t = self.mlp.forward(p, t)?;
        from_tokens(p, t, s.h(), s.w())
    }
}

/// Patch-embedding attention stream.
#[derive(Clone, Debug)]
pub struct RgbEncoder {
    pub stages: Vec<TransformerStage>,
}

impl RgbEncoder {
    pub fn new(store: &mut ParamStore, name: &str, widths: [usize; 4], rng: &mut InitRng) -> Self {
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let n = format!("{name}.stage{}", i + 1);
            let embed = if i == 0 {
                Conv2d::new(store, &format!("{n}.embed"), 3, widths[0], 7, 4, 3, rng)
            } else {
                Conv2d::new(store, &format!("{n}.embed"), widths[i - 1], widths[i], 3, 2, 1, rng)
            };
            stages.push(TransformerStage {
                embed,
                embed_bn: BatchNorm2d::new(store, &format!("{n}.embed_bn"), widths[i]),
                attn: SelfAttention::new(store, &format!("{n}.attn"), widths[i], rng),
                mlp: Mlp::new(store, &format!("{n}.mlp"), widths[i], rng),
            });
        }
        RgbEncoder { stages }
    }

    pub fn forward(&self, p: &mut Pass, rgb: Var) -> Result<StageFeatures> {
        check_input(p, rgb, "rgb")?;
        let mut x = rgb;
        let mut f = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(p, x)?;
            f[i] = x;
        }
        Ok(StageFeatures { f })
    }
}

/// Copies a one-channel map into three identical channels.
pub fn replicate_channels(p: &mut Pass, x: Var) -> Result<Var> {
    let c = p.graph.shape(x).c();
    if c != 1 {
        return Err(Error::dim("replicate_channels", format!("expected 1 channel, got {c}")));
    }
    p.graph.concat(&[x, x, x], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init, Mode};
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn contract_arithmetic() {
        let c = StageContract::toy((64, 96)).unwrap();
        assert_eq!(c.stage_size(0), (16, 24));
        assert_eq!(c.stage_size(3), (2, 3));
        assert!(StageContract::toy((48, 64)).is_err());
        assert!(StageContract::toy((0, 64)).is_err());
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut store = ParamStore::new();
        let enc = DepthEncoder::new(&mut store, "d", [8, 8, 8, 8], &mut init::rng(0));
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 40, 64]));
        let mut p = Pass::new(&mut g, &mut store, Mode::Eval);
        assert!(matches!(enc.forward(&mut p, x), Err(Error::Contract(_))));
    }
}
