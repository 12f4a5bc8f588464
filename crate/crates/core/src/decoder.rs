//! Top-down pyramid decoder with one prediction head per stage.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::init::InitRng;
use crate::nn::{upsample, BatchNorm2d, Conv2d, ParamStore, Pass, Resize};
use crate::tensor::Var;
use crate::{Error, Result};

/// `ReLU(BN(Conv1×1(x)))`.
#[derive(Clone, Debug)]
pub struct NfeUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl NfeUnit {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut InitRng) -> Self {
        NfeUnit {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 1, 1, 0, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let y = self.conv.forward(p, x)?;
        let y = self.bn.forward(p, y)?;
        Ok(p.relu(y))
    }
}

/// Cascade of NFE pairs. Stage 4 refines its fused input alone; every
/// finer stage refines `Cat(fused, Up×2(coarser output))`.
#[derive(Clone, Debug)]
pub struct Cprn {
    /// Finest stage first.
    pub units: Vec<[NfeUnit; 2]>,
    pub width: usize,
}

impl Cprn {
    pub fn new(store: &mut ParamStore, name: &str, fused_widths: [usize; 4], width: usize, rng: &mut InitRng) -> Self {
        let units = (0..4)
            .map(|i| {
                let cin = if i == 3 { fused_widths[i] } else { fused_widths[i] + width };
                [
                    NfeUnit::new(store, &format!("{name}.stage{}.0", i + 1), cin, width, rng),
                    NfeUnit::new(store, &format!("{name}.stage{}.1", i + 1), width, width, rng),
                ]
            })
            .collect();
        Cprn { units, width }
    }

    /// Returns the refined maps, finest first.
    pub fn forward(&self, p: &mut Pass, fused: [Var; 4]) -> Result<[Var; 4]> {
        let mut out = fused;
        let mut coarser: Option<Var> = None;
        for i in (0..4).rev() {
            let input = match coarser {
                None => fused[i],
                Some(prev) => {
                    let up = upsample(p.graph, prev, Resize::Scale(2))?;
                    let (a, b) = (p.graph.shape(fused[i]), p.graph.shape(up));
                    if (a.h(), a.w()) != (b.h(), b.w()) {
                        return Err(Error::dim(
                            "cprn_forward",
                            format!("stage {} is {:?} but the upsampled coarser map is {:?}", i + 1, a, b),
                        ));
                    }
                    p.graph.concat(&[fused[i], up], 1)?
                }
            };
            let [a, b] = &self.units[i];
            let y = a.forward(p, input)?;
            let y = b.forward(p, y)?;
            out[i] = y;
            coarser = Some(y);
        }
        Ok(out)
    }
}

/// Conv3×3 → BN → ReLU → Conv1×1 to one channel, upsampled to the input
/// resolution and squashed by a sigmoid.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub conv3: Conv2d,
    pub bn: BatchNorm2d,
    pub conv1: Conv2d,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut InitRng) -> Self {
        PredictionHead {
            conv3: Conv2d::same(store, &format!("{name}.conv3"), width, width, 3, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), width),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), width, 1, 1, 1, 0, rng),
        }
    }

    /// Single-channel logits at the feature resolution.
    pub fn logits(&self, p: &mut Pass, x: Var) -> Result<Var> {
        let y = self.conv3.forward(p, x)?;
        let y = self.bn.forward(p, y)?;
        let y = p.relu(y);
        self.conv1.forward(p, y)
    }

    pub fn forward(&self, p: &mut Pass, x: Var, target: (usize, usize)) -> Result<Var> {
        let z = self.logits(p, x)?;
        let z = upsample(p.graph, z, Resize::Target(target.0, target.1))?;
        Ok(p.sigmoid(z))
    }
}

/// The four deeply supervised predictions at input resolution, each
/// `(n, 1, H, W)` in `(0, 1)`. `p[0]` is the final saliency map.
#[derive(Clone, Copy, Debug)]
pub struct SaliencyOutput {
    pub p: [Var; 4],
}

impl SaliencyOutput {
    pub fn final_map(&self) -> Var {
        self.p[0]
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cprn: Cprn,
    pub heads: Vec<PredictionHead>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, fused_widths: [usize; 4], width: usize, rng: &mut InitRng) -> Self {
        let cprn = Cprn::new(store, &format!("{name}.cprn"), fused_widths, width, rng);
        let heads = (0..4)
            .map(|i| PredictionHead::new(store, &format!("{name}.head{}", i + 1), width, rng))
            .collect();
        Decoder { cprn, heads }
    }

    pub fn forward(&self, p: &mut Pass, fused: [Var; 4], target: (usize, usize)) -> Result<SaliencyOutput> {
        let refined = self.cprn.forward(p, fused)?;
        let mut out = refined;
        for (i, head) in self.heads.iter().enumerate() {
            out[i] = head.forward(p, refined[i], target)?;
        }
        Ok(SaliencyOutput { p: out })
    }
}
