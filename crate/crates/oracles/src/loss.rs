//! Per-pixel and per-window loss formulas for a batch of single-channel
//! maps, each `h×w`, stored back to back.

pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;

/// Summed binary cross-entropy per image, averaged over images.
pub fn bce(p: &[f64], g: &[f64], images: usize) -> f64 {
    let per = p.len() / images;
    let mut total = 0.0;
    for i in 0..images {
        let mut s = 0.0;
        for j in i * per..(i + 1) * per {
            let q = p[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            s -= g[j] * q.ln() + (1.0 - g[j]) * (1.0 - q).ln();
        }
        total += s;
    }
    total / images as f64
}

/// `1 - Σ PG / max(Σ (P + G - PG), eps)` per image, averaged.
pub fn iou(p: &[f64], g: &[f64], images: usize) -> f64 {
    let per = p.len() / images;
    let mut total = 0.0;
    for i in 0..images {
        let (mut inter, mut union) = (0.0, 0.0);
        for j in i * per..(i + 1) * per {
            inter += p[j] * g[j];
            union += p[j] + g[j] - p[j] * g[j];
        }
        total += 1.0 - inter / union.max(IOU_EPS);
    }
    total / images as f64
}

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = vec![0.0; WINDOW * WINDOW];
    for a in 0..WINDOW {
        for b in 0..WINDOW {
            w[a * WINDOW + b] = g[a] * g[b];
        }
    }
    w
}

fn ssim_of_patch(p: &[f64], g: &[f64], weights: &[f64]) -> f64 {
    let mu_p: f64 = p.iter().zip(weights).map(|(a, w)| a * w).sum();
    let mu_g: f64 = g.iter().zip(weights).map(|(a, w)| a * w).sum();
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    let mut cov = 0.0;
    for k in 0..p.len() {
        var_p += weights[k] * (p[k] - mu_p) * (p[k] - mu_p);
        var_g += weights[k] * (g[k] - mu_g) * (g[k] - mu_g);
        cov += weights[k] * (p[k] - mu_p) * (g[k] - mu_g);
    }
    ((2.0 * mu_p * mu_g + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_p * mu_p + mu_g * mu_g + SSIM_C1) * (var_p + var_g + SSIM_C2))
}

/// `1 - mean SSIM` over all 11×11 Gaussian windows lying inside the image;
/// images smaller than the window are one uniformly weighted patch.
pub fn ssim(p: &[f64], g: &[f64], images: usize, h: usize, w: usize) -> f64 {
    let per = h * w;
    let mut scores = Vec::new();
    if h < WINDOW || w < WINDOW {
        let weights = vec![1.0 / per as f64; per];
        for i in 0..images {
            scores.push(ssim_of_patch(&p[i * per..(i + 1) * per], &g[i * per..(i + 1) * per], &weights));
        }
    } else {
        let weights = gaussian_window();
        for i in 0..images {
            for top in 0..=h - WINDOW {
                for left in 0..=w - WINDOW {
                    let mut pp = Vec::with_capacity(WINDOW * WINDOW);
                    let mut gg = Vec::with_capacity(WINDOW * WINDOW);
                    for a in 0..WINDOW {
                        for b in 0..WINDOW {
                            let idx = i * per + (top + a) * w + left + b;
                            pp.push(p[idx]);
                            gg.push(g[idx]);
                        }
                    }
                    scores.push(ssim_of_patch(&pp, &gg, &weights));
                }
            }
        }
    }
    1.0 - scores.iter().sum::<f64>() / scores.len() as f64
}
