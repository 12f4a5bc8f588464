//! Evaluation measures transcribed from their original definitions with
//! 1-based, column/row loops and per-threshold brute force.
//!
//! `pred` is in `[0, 1]`, `gt` holds 0/1, both `rows×cols` row-major.

const EPS: f64 = f64::EPSILON;

struct Map<'a> {
    v: &'a [f64],
    cols: usize,
}

impl Map<'_> {
    /// 1-based `(row, col)` access.
    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[(r - 1) * self.cols + (c - 1)]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

fn matlab_round(x: f64) -> f64 {
    // half away from zero
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        -((-x + 0.5).floor())
    }
}

fn object_score(vals: &[f64]) -> f64 {
    let x = mean(vals);
    let sigma = if vals.len() > 1 {
        (vals.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..p.len() {
        sx += (p[i] - x).powi(2);
        sy += (g[i] - y).powi(2);
        sxy += (p[i] - x) * (g[i] - y);
    }
    sx /= n - 1.0 + EPS;
    sy /= n - 1.0 + EPS;
    sxy /= n - 1.0 + EPS;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure, alpha = 0.5.
pub fn s_measure(pred: &[f64], gt: &[f64], rows: usize, cols: usize) -> f64 {
    let y = mean(gt);
    if y == 0.0 {
        return 1.0 - mean(pred);
    }
    if y == 1.0 {
        return mean(pred);
    }
    let p = Map { v: pred, cols };
    let g = Map { v: gt, cols };

    // object term
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 1..=rows {
        for c in 1..=cols {
            if g.at(r, c) > 0.5 {
                fg.push(p.at(r, c));
            } else {
                bg.push(1.0 - p.at(r, c));
            }
        }
    }
    let s_object = y * object_score(&fg) + (1.0 - y) * object_score(&bg);

    // region term: split at the rounded 1-based centroid of the foreground
    let total: f64 = gt.iter().sum();
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 1..=rows {
        for c in 1..=cols {
            sx += g.at(r, c) * c as f64;
            sy += g.at(r, c) * r as f64;
        }
    }
    let cx = matlab_round(sx / total) as usize;
    let cy = matlab_round(sy / total) as usize;
    let area = (rows * cols) as f64;
    let quads = [
        (1, cy, 1, cx),
        (1, cy, cx + 1, cols),
        (cy + 1, rows, 1, cx),
        (cy + 1, rows, cx + 1, cols),
    ];
    let mut weights = [0.0; 4];
    weights[0] = (cx * cy) as f64 / area;
    weights[1] = ((cols - cx) * cy) as f64 / area;
    weights[2] = (cx * (rows - cy)) as f64 / area;
    weights[3] = 1.0 - weights[0] - weights[1] - weights[2];
    let mut s_region = 0.0;
    for (k, (r0, r1, c0, c1)) in quads.iter().enumerate() {
        let mut pp = Vec::new();
        let mut gg = Vec::new();
        for r in *r0..=*r1 {
            for c in *c0..=*c1 {
                pp.push(p.at(r, c));
                gg.push(g.at(r, c));
            }
        }
        if pp.is_empty() {
            continue;
        }
        s_region += weights[k] * region_ssim(&pp, &gg);
    }
    let q = 0.5 * s_object + 0.5 * s_region;
    q.max(0.0)
}

fn thresholds() -> impl Iterator<Item = f64> {
    (0..256).map(|k| k as f64 / 255.0)
}

/// Maximum F-measure (beta² = 0.3) over 256 thresholds `pred >= k/255`.
pub fn f_measure_max(pred: &[f64], gt: &[f64]) -> f64 {
    let positives = gt.iter().filter(|g| **g > 0.5).count() as f64;
    if positives == 0.0 {
        return 0.0;
    }
    let mut best = 0.0f64;
    for t in thresholds() {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for i in 0..pred.len() {
            if pred[i] >= t {
                if gt[i] > 0.5 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / positives;
        let f = if precision + recall > 0.0 {
            1.3 * precision * recall / (0.3 * precision + recall)
        } else {
            0.0
        };
        best = best.max(f);
    }
    best
}

/// Enhanced-alignment score of a binary map against the ground truth,
/// averaged over pixels.
pub fn e_measure_binary(fm: &[f64], gt: &[f64]) -> f64 {
    let n = gt.len() as f64;
    let fg: f64 = gt.iter().sum();
    let enhanced: Vec<f64> = if fg == 0.0 {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if fg == n {
        fm.to_vec()
    } else {
        let mu_fm = mean(fm);
        let mu_gt = mean(gt);
        (0..fm.len())
            .map(|i| {
                let a = fm[i] - mu_fm;
                let b = gt[i] - mu_gt;
                let align = 2.0 * (b * a) / (b * b + a * a + EPS);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n
}

/// Maximum enhanced-alignment measure over 256 thresholds.
pub fn e_measure_max(pred: &[f64], gt: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for t in thresholds() {
        let fm: Vec<f64> = pred.iter().map(|p| if *p >= t { 1.0 } else { 0.0 }).collect();
        best = best.max(e_measure_binary(&fm, gt));
    }
    best
}
