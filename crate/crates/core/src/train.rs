//! Optimisation loop pieces and a synthetic RGB-D corpus.

use alloc::vec::Vec;

use rand::Rng;

use crate::loss::{total_loss, LossBreakdown};
use crate::nn::{decayed_lr, init, Adam, Mode};
use crate::tensor::{Graph, Tensor};
use crate::{Error, Model, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f64,
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay: 0.9,
            steps_per_epoch: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.steps_per_epoch == 0 {
            return Err(Error::Config(alloc::format!("invalid training settings {:?}", self)));
        }
        Ok(())
    }
}

/// One mini-batch: `(n, 3, H, W)` RGB, `(n, 1, H, W)` depth and ground truth.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
}

impl Batch {
    /// Stacks single-image samples along the batch axis.
    pub fn stack(samples: &[&Batch]) -> Result<Batch> {
        let cat = |pick: fn(&Batch) -> &Tensor| -> Result<Tensor> {
            let first = pick(samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?);
            let s = first.shape();
            let mut data = Vec::with_capacity(s.numel() * samples.len());
            let mut n = 0;
            for b in samples {
                let t = pick(b);
                let ts = t.shape();
                if (ts.c(), ts.h(), ts.w()) != (s.c(), s.h(), s.w()) {
                    return Err(Error::dim("Batch::stack", alloc::format!("{:?} vs {:?}", ts, s)));
                }
                data.extend_from_slice(t.data());
                n += ts.n();
            }
            Tensor::new([n, s.c(), s.h(), s.w()], data)
        };
        Ok(Batch {
            rgb: cat(|b| &b.rgb)?,
            depth: cat(|b| &b.depth)?,
            gt: cat(|b| &b.gt)?,
        })
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: Adam::new(config.lr),
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.step / self.config.steps_per_epoch
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        decayed_lr(self.config.lr, self.config.lr_decay, epoch as u32)
    }

    /// Forward, backward and one Adam update. Returns the loss measured
    /// before the update.
    pub fn step(&mut self, model: &mut Model, batch: &Batch) -> Result<LossBreakdown> {
        self.adam.lr = self.lr_at_epoch(self.epoch());
        let mut g = Graph::new();
        let rgb = g.constant(batch.rgb.clone());
        let depth = g.constant(batch.depth.clone());
        let gt = g.constant(batch.gt.clone());
        let out = model.forward(&mut g, rgb, depth, Mode::Train)?;
        let (loss, breakdown) = total_loss(&mut g, &out, gt)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Contract(alloc::format!("non-finite loss at step {}", self.step)));
        }
        g.backward(loss)?;
        model.store.zero_grad();
        model.store.pull_grads(&g)?;
        self.adam.step(&mut model.store)?;
        self.step += 1;
        Ok(breakdown)
    }
}

/// Loss and final-map MAE of a batch without updating anything.
pub fn evaluate(model: &mut Model, batch: &Batch, mode: Mode) -> Result<(LossBreakdown, f64)> {
    let mut g = Graph::new();
    let rgb = g.constant(batch.rgb.clone());
    let depth = g.constant(batch.depth.clone());
    let gt = g.constant(batch.gt.clone());
    let out = model.forward(&mut g, rgb, depth, mode)?;
    let (_, breakdown) = total_loss(&mut g, &out, gt)?;
    let p = g.value(out.final_map()).data();
    let mae = p.iter().zip(batch.gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    Ok((breakdown, mae))
}

/// A centred-square scene: the square is a distinct colour and nearer in
/// depth than a sloped background. Side length cycles through
/// `size · {2, 3, 4, 5} / 8` with the index; colours and noise depend on
/// `index` only.
pub fn synthetic_scene(index: usize, size: usize) -> Batch {
    let mut rng = init::rng(0x5ce7e ^ index as u64);
    let side = size * (2 + index % 4) / 8;
    let lo = (size - side) / 2;
    let inside = |h: usize, w: usize| (lo..lo + side).contains(&h) && (lo..lo + side).contains(&w);
    let fg: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let bg: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.05..0.45));
    let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let rgb = Tensor::from_fn([1, 3, size, size], |_, c, h, w| {
        let base = if inside(h, w) { fg[c] } else { bg[c] };
        (base + noise[(c * size + h) * size + w]).clamp(0.0, 1.0)
    });
    let depth = Tensor::from_fn([1, 1, size, size], |_, _, h, w| {
        if inside(h, w) {
            0.85
        } else {
            0.15 + 0.25 * h as f64 / size as f64
        }
    });
    let gt = Tensor::from_fn([1, 1, size, size], |_, _, h, w| inside(h, w) as u8 as f64);
    Batch { rgb, depth, gt }
}

/// The four-scene corpus used for overfit runs, as single-image batches.
pub fn toy_corpus(size: usize) -> Vec<Batch> {
    (0..4).map(|i| synthetic_scene(i, size)).collect()
}
