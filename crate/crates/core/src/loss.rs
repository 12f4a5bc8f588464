//! Hybrid saliency loss: binary cross-entropy + SSIM + IoU per prediction,
//! summed over the four supervised outputs.
//!
//! All functions take `(n, 1, H, W)` predictions in `(0, 1)` and binary
//! targets of the same shape and return a `(1, 1, 1, 1)` tape value.

use alloc::format;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::decoder::SaliencyOutput;
use crate::tensor::{Axes, Graph, Tensor, Var};
use crate::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(g: &Graph, p: Var, t: Var, op: &'static str) -> Result<()> {
    let (a, b) = (g.shape(p), g.shape(t));
    if a != b {
        return Err(Error::dim(op, format!("prediction {:?} vs target {:?}", a, b)));
    }
    if a.c() != 1 {
        return Err(Error::dim(op, format!("expected single-channel maps, got {:?}", a)));
    }
    Ok(())
}

/// Pixel-summed cross-entropy, averaged over the batch.
pub fn bce(g: &mut Graph, p: Var, t: Var) -> Result<Var> {
    check_pair(g, p, t, "bce_loss")?;
    let n = g.shape(p).n() as f64;
    let q = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_q = g.ln(q)?;
    let neg_q = g.neg(q);
    let one_minus_q = g.add_scalar(neg_q, 1.0);
    let log_1q = g.ln(one_minus_q)?;
    let neg_t = g.neg(t);
    let one_minus_t = g.add_scalar(neg_t, 1.0);
    let a = g.mul(t, log_q)?;
    let b = g.mul(one_minus_t, log_1q)?;
    let ll = g.add(a, b)?;
    let s = g.sum(ll, Axes::ALL)?;
    Ok(g.mul_scalar(s, -1.0 / n))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| libm::exp(-(i as f64 - half) * (i as f64 - half) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)))
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// The 2-D window as a `(1, 1, k, k)` kernel.
pub fn gaussian_window() -> Tensor {
    let g = gaussian_taps();
    Tensor::from_fn([1, 1, SSIM_WINDOW, SSIM_WINDOW], |_, _, a, b| g[a] * g[b])
}

/// Gaussian-weighted mean of every window lying inside each map, as two
/// 1-D passes: `(n, 1, h, w) -> (n, 1, h - k + 1, w - k + 1)`.
fn window_means(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let (n, h, w, k) = (s.n() * s.c(), s.h(), s.w(), SSIM_WINDOW);
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let taps = gaussian_taps();
    let src = g.value(x).data();
    let mut rows = vec![0.0; n * h * ow];
    let mut out = vec![0.0; n * oh * ow];
    for m in 0..n {
        for r in 0..h {
            let line = &src[(m * h + r) * w..(m * h + r + 1) * w];
            for j in 0..ow {
                rows[(m * h + r) * ow + j] = (0..k).map(|b| taps[b] * line[j + b]).sum();
            }
        }
        for i in 0..oh {
            for (a, t) in taps.iter().enumerate() {
                let from = &rows[(m * h + i + a) * ow..(m * h + i + a + 1) * ow];
                let to = &mut out[(m * oh + i) * ow..(m * oh + i + 1) * ow];
                to.iter_mut().zip(from).for_each(|(o, v)| *o += t * v);
            }
        }
    }
    let value = Tensor::new([s.n(), s.c(), oh, ow], out)?;
    g.custom(
        x,
        value,
        Box::new(move |_x, _y, gy, gx| {
            let mut grows = vec![0.0; ow * h];
            for m in 0..n {
                grows.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..oh {
                    for (a, t) in taps.iter().enumerate() {
                        let from = &gy[(m * oh + i) * ow..(m * oh + i + 1) * ow];
                        let to = &mut grows[(i + a) * ow..(i + a + 1) * ow];
                        to.iter_mut().zip(from).for_each(|(o, v)| *o += t * v);
                    }
                }
                for r in 0..h {
                    let line = &mut gx[(m * h + r) * w..(m * h + r + 1) * w];
                    for j in 0..ow {
                        let v = grows[r * ow + j];
                        for b in 0..k {
                            line[j + b] += taps[b] * v;
                        }
                    }
                }
            }
        }),
    )
}

/// `1 −` mean SSIM over every window position lying fully inside the image.
/// Maps smaller than the window are scored as one uniformly weighted patch.
pub fn ssim(g: &mut Graph, p: Var, t: Var) -> Result<Var> {
    check_pair(g, p, t, "ssim_loss")?;
    let s = g.shape(p);
    let pp = g.mul(p, p)?;
    let tt = g.mul(t, t)?;
    let pt = g.mul(p, t)?;
    let local = |g: &mut Graph, x: Var| -> Result<Var> {
        if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
            g.mean(x, Axes::SPATIAL)
        } else {
            window_means(g, x)
        }
    };
    let mu_p = local(g, p)?;
    let mu_t = local(g, t)?;
    let e_pp = local(g, pp)?;
    let e_tt = local(g, tt)?;
    let e_pt = local(g, pt)?;

    let mu_pp = g.mul(mu_p, mu_p)?;
    let mu_tt = g.mul(mu_t, mu_t)?;
    let mu_pt = g.mul(mu_p, mu_t)?;
    let var_p = g.sub(e_pp, mu_pp)?;
    let var_t = g.sub(e_tt, mu_tt)?;
    let cov = g.sub(e_pt, mu_pt)?;

    let a = g.mul_scalar(mu_pt, 2.0);
    let a = g.add_scalar(a, SSIM_C1);
    let b = g.mul_scalar(cov, 2.0);
    let b = g.add_scalar(b, SSIM_C2);
    let num = g.mul(a, b)?;
    let c = g.add(mu_pp, mu_tt)?;
    let c = g.add_scalar(c, SSIM_C1);
    let d = g.add(var_p, var_t)?;
    let d = g.add_scalar(d, SSIM_C2);
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    let m = g.mean(map, Axes::ALL)?;
    let neg = g.neg(m);
    Ok(g.add_scalar(neg, 1.0))
}

/// `1 − ΣPG / max(Σ(P + G − PG), ε)` per image, averaged over the batch.
/// The floor only matters when both maps are all zero.
pub fn iou(g: &mut Graph, p: Var, t: Var) -> Result<Var> {
    check_pair(g, p, t, "iou_loss")?;
    let inter = g.mul(p, t)?;
    let sum = g.add(p, t)?;
    let union = g.sub(sum, inter)?;
    let i = g.sum(inter, Axes::PER_ITEM)?;
    let u = g.sum(union, Axes::PER_ITEM)?;
    let u = g.clamp(u, IOU_EPS, f64::INFINITY);
    let r = g.div(i, u)?;
    let m = g.mean(r, Axes::ALL)?;
    let neg = g.neg(m);
    Ok(g.add_scalar(neg, 1.0))
}

/// The three terms of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageLoss {
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
}

impl StageLoss {
    pub fn hybrid(&self) -> f64 {
        self.bce + self.ssim + self.iou
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Finest prediction first.
    pub stages: [StageLoss; 4],
    pub total: f64,
}

/// Hybrid loss of one prediction plus its components.
pub fn hybrid(g: &mut Graph, p: Var, t: Var) -> Result<(Var, StageLoss)> {
    let b = bce(g, p, t)?;
    let s = ssim(g, p, t)?;
    let i = iou(g, p, t)?;
    let parts = StageLoss {
        bce: g.value(b).data()[0],
        ssim: g.value(s).data()[0],
        iou: g.value(i).data()[0],
    };
    let bs = g.add(b, s)?;
    Ok((g.add(bs, i)?, parts))
}

/// Sum of the hybrid loss over all four predictions.
pub fn total_loss(g: &mut Graph, out: &SaliencyOutput, target: Var) -> Result<(Var, LossBreakdown)> {
    let mut stages = [StageLoss::default(); 4];
    let mut total: Option<Var> = None;
    for (i, p) in out.p.iter().enumerate() {
        let (l, parts) = hybrid(g, *p, target)?;
        stages[i] = parts;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = total.expect("four stages");
    let value = g.value(total).data()[0];
    Ok((total, LossBreakdown { stages, total: value }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_sums_to_one() {
        let w = gaussian_window();
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(w.get(0, 0, 5, 5), w.data().iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn separable_windows_match_direct_convolution() {
        let mut rng = crate::nn::init::rng(3);
        let x = crate::gradcheck::random_tensor(&mut rng, [2, 1, 13, 15]);
        let mut g = Graph::new();
        let xv = g.input(x);
        let a = window_means(&mut g, xv).unwrap();
        let w = g.constant(gaussian_window());
        let b = g.conv2d(xv, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(a), g.shape(b));
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-14);
        let cfg = crate::gradcheck::GradCheckConfig::default();
        let x = crate::gradcheck::random_tensor(&mut rng, [2, 1, 12, 13]);
        let r = crate::gradcheck::check("window_means", &[x], &cfg, |g, v| {
            let y = window_means(g, v[0])?;
            crate::gradcheck::weighted_sum(g, y, 4)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn half_prediction_costs_ln2_per_pixel() {
        let mut g = Graph::new();
        let p = g.input(Tensor::full([2, 1, 4, 4], 0.5));
        let t = g.input(Tensor::from_fn([2, 1, 4, 4], |_, _, h, w| ((h + w) % 2) as f64));
        let l = bce(&mut g, p, t).unwrap();
        assert!((g.value(l).data()[0] - 16.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }
}
