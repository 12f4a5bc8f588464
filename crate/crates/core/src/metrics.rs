//! Salient-object-detection measures on single maps.
//!
//! Predictions are `[0, 1]` maps and ground truths are binary, both
//! `(1, 1, H, W)`. The threshold sweeps use the 256 levels `k / 255` with
//! `pred >= level`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const F_BETA_SQ: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
pub const LEVELS: usize = 256;
const EPS: f64 = f64::EPSILON;

fn check(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (a, b) = (pred.shape(), gt.shape());
    if a != b {
        return Err(Error::dim(op, format!("prediction {:?} vs ground truth {:?}", a, b)));
    }
    if a.n() * a.c() != 1 || a.numel() == 0 {
        return Err(Error::dim(op, format!("expected one non-empty map, got {:?}", a)));
    }
    Ok((a.h(), a.w()))
}

fn is_fg(v: f64) -> bool {
    v > 0.5
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt, "mae")?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Highest level index `k` with `p >= k / 255`; `None` when `p < 0`.
fn level_of(p: f64) -> Option<usize> {
    if p < 0.0 {
        return None;
    }
    let mut k = (libm::floor(p * 255.0) as i64).clamp(0, 255) as usize;
    while k < 255 && p >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while k > 0 && p < k as f64 / 255.0 {
        k -= 1;
    }
    Some(k)
}

/// For every level, how many foreground and background pixels are
/// predicted positive.
fn positive_counts(pred: &[f64], gt: &[f64]) -> ([u64; LEVELS], [u64; LEVELS]) {
    let mut fg = [0u64; LEVELS];
    let mut bg = [0u64; LEVELS];
    for (p, g) in pred.iter().zip(gt) {
        if let Some(k) = level_of(*p) {
            if is_fg(*g) {
                fg[k] += 1;
            } else {
                bg[k] += 1;
            }
        }
    }
    // suffix sums: level k counts every pixel whose own level is >= k
    for k in (0..LEVELS - 1).rev() {
        fg[k] += fg[k + 1];
        bg[k] += bg[k + 1];
    }
    (fg, bg)
}

/// Maximum F-measure over the level sweep. Returns `None` when the ground
/// truth has no foreground, where recall is undefined.
pub fn f_measure_max(pred: &Tensor, gt: &Tensor) -> Result<Option<f64>> {
    check(pred, gt, "f_measure_max")?;
    let positives = gt.data().iter().filter(|g| is_fg(**g)).count() as f64;
    if positives == 0.0 {
        return Ok(None);
    }
    let (tp, fp) = positive_counts(pred.data(), gt.data());
    let mut best = 0.0f64;
    for k in 0..LEVELS {
        let (tp, fp) = (tp[k] as f64, fp[k] as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / positives;
        let den = F_BETA_SQ * precision + recall;
        if den > 0.0 {
            best = best.max((1.0 + F_BETA_SQ) * precision * recall / den);
        }
    }
    Ok(Some(best))
}

/// Enhanced alignment of a binary map given its confusion counts.
fn enhanced_alignment(tp: f64, fp: f64, fn_: f64, tn: f64) -> f64 {
    let n = tp + fp + fn_ + tn;
    let fg = tp + fn_;
    let predicted = tp + fp;
    if fg == 0.0 {
        return (n - predicted) / n;
    }
    if fg == n {
        return predicted / n;
    }
    let mu_f = predicted / n;
    let mu_g = fg / n;
    let phi = |f: f64, g: f64| {
        let a = f - mu_f;
        let b = g - mu_g;
        let align = 2.0 * a * b / (a * a + b * b + EPS);
        (align + 1.0) * (align + 1.0) / 4.0
    };
    (tp * phi(1.0, 1.0) + fp * phi(1.0, 0.0) + fn_ * phi(0.0, 1.0) + tn * phi(0.0, 0.0)) / n
}

/// Maximum enhanced-alignment measure over the level sweep.
pub fn e_measure_max(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt, "e_measure_max")?;
    let fg = gt.data().iter().filter(|g| is_fg(**g)).count() as f64;
    let bg = pred.numel() as f64 - fg;
    let (tp, fp) = positive_counts(pred.data(), gt.data());
    let mut best = 0.0f64;
    for k in 0..LEVELS {
        let (tp, fp) = (tp[k] as f64, fp[k] as f64);
        best = best.max(enhanced_alignment(tp, fp, fg - tp, bg - fp));
    }
    Ok(best)
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = v.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = v.clone().sum::<f64>() / n as f64;
    let std = if n > 1 {
        libm::sqrt(v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    (mean, std, n)
}

fn object_term(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, _) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// SSIM-style agreement of one rectangular block.
fn block_score(pred: &[f64], gt: &[f64], cols: usize, rows: core::ops::Range<usize>, cs: core::ops::Range<usize>) -> f64 {
    let idx: Vec<usize> = rows.flat_map(|r| cs.clone().map(move |c| r * cols + c)).collect();
    let n = idx.len() as f64;
    let x = idx.iter().map(|i| pred[*i]).sum::<f64>() / n;
    let y = idx.iter().map(|i| gt[*i]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in &idx {
        let (dx, dy) = (pred[*i] - x, gt[*i] - y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let d = n - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure: equal mix of an object-aware and a region-aware
/// term, the latter split at the rounded foreground centroid.
pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (rows, cols) = check(pred, gt, "s_measure")?;
    let (p, g) = (pred.data(), gt.data());
    let area = (rows * cols) as f64;
    let y = g.iter().sum::<f64>() / area;
    if y == 0.0 {
        return Ok(1.0 - p.iter().sum::<f64>() / area);
    }
    if y == 1.0 {
        return Ok(p.iter().sum::<f64>() / area);
    }

    let fg = p.iter().zip(g).filter(|(_, g)| is_fg(**g)).map(|(p, _)| *p);
    let bg = p.iter().zip(g).filter(|(_, g)| !is_fg(**g)).map(|(p, _)| 1.0 - *p);
    let object = y * object_term(fg) + (1.0 - y) * object_term(bg);

    // centroid in 1-based pixel coordinates, rounded half away from zero,
    // doubles as the 0-based exclusive split index
    let total: f64 = g.iter().sum();
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, v) in g.iter().enumerate() {
        cx += v * (i % cols + 1) as f64;
        cy += v * (i / cols + 1) as f64;
    }
    let sx = libm::round(cx / total) as usize;
    let sy = libm::round(cy / total) as usize;
    let blocks = [
        (0..sy, 0..sx),
        (0..sy, sx..cols),
        (sy..rows, 0..sx),
        (sy..rows, sx..cols),
    ];
    let w0 = (sx * sy) as f64 / area;
    let w1 = ((cols - sx) * sy) as f64 / area;
    let w2 = (sx * (rows - sy)) as f64 / area;
    let weights = [w0, w1, w2, 1.0 - w0 - w1 - w2];
    let mut region = 0.0;
    for ((r, c), w) in blocks.into_iter().zip(weights) {
        if r.is_empty() || c.is_empty() {
            continue;
        }
        region += w * block_score(p, g, cols, r, c);
    }
    Ok((S_ALPHA * object + (1.0 - S_ALPHA) * region).max(0.0))
}

/// All four measures of one map.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub mae: f64,
    pub s_alpha: f64,
    pub f_beta_max: f64,
    pub e_xi_max: f64,
    /// Set when the ground truth has no foreground; `f_beta_max` is then 0.
    pub empty_gt: bool,
}

pub fn score(name: impl Into<String>, pred: &Tensor, gt: &Tensor) -> Result<ImageScores> {
    let f = f_measure_max(pred, gt)?;
    Ok(ImageScores {
        name: name.into(),
        mae: mae(pred, gt)?,
        s_alpha: s_measure(pred, gt)?,
        f_beta_max: f.unwrap_or(0.0),
        e_xi_max: e_measure_max(pred, gt)?,
        empty_gt: f.is_none(),
    })
}

/// Per-image rows and their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScores>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanScores {
    pub mae: f64,
    pub s_alpha: f64,
    pub f_beta_max: f64,
    pub e_xi_max: f64,
}

impl EvalReport {
    pub fn push(&mut self, s: ImageScores) {
        self.images.push(s);
    }

    pub fn count(&self) -> usize {
        self.images.len()
    }

    pub fn means(&self) -> MeanScores {
        let n = self.images.len().max(1) as f64;
        let mut m = MeanScores::default();
        for s in &self.images {
            m.mae += s.mae;
            m.s_alpha += s.s_alpha;
            m.f_beta_max += s.f_beta_max;
            m.e_xi_max += s.e_xi_max;
        }
        m.mae /= n;
        m.s_alpha /= n;
        m.f_beta_max /= n;
        m.e_xi_max /= n;
        m
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ImageScores> {
        self.images.iter().filter(|s| s.empty_gt)
    }
}
