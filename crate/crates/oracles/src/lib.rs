//! Straight-line reference implementations.
//!
//! Every function here works on flat `f64` slices with explicit extents and
//! is written from the defining formula with plain loops. Nothing in this
//! crate depends on `hodinet-core`: these are the independent side of the
//! cross-checks in that crate's tests and in the `selftest` command.

pub mod fusion;
pub mod loss;
pub mod metrics;

/// `a[m×k] · b[k×n]`, triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Expands `src` of extent `from` to extent `to` by repeating singleton axes.
pub fn tile(src: &[f64], from: [usize; 4], to: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::with_capacity(to.iter().product());
    for n in 0..to[0] {
        for c in 0..to[1] {
            for h in 0..to[2] {
                for w in 0..to[3] {
                    let idx = [n, c, h, w];
                    let mut off = 0;
                    for ax in 0..4 {
                        let i = if from[ax] == 1 { 0 } else { idx[ax] };
                        off = off * from[ax] + i;
                    }
                    out.push(src[off]);
                }
            }
        }
    }
    out
}

/// Direct 2-D cross-correlation: `x (n, cin, h, w)`, `weight (cout, cin, k, k)`.
/// Returns the output and its spatial extent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xo * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                s += weight[((o * cin + c) * k + ky) * k + kx]
                                    * x[((b * cin + c) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + y) * wo + xo] = s;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Bilinear resize of one `h×w` plane, half-pixel centres, edge clamped.
pub fn bilinear_resize(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sample = |yy: f64, xx: f64| -> f64 {
        let y0 = yy.floor() as usize;
        let x0 = xx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let (fy, fx) = (yy - y0 as f64, xx - x0 as f64);
        x[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
            + x[y0 * w + x1] * (1.0 - fy) * fx
            + x[y1 * w + x0] * fy * (1.0 - fx)
            + x[y1 * w + x1] * fy * fx
    };
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let sy = (((i as f64) + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
            let sx = (((j as f64) + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
            out[i * ow + j] = sample(sy, sx);
        }
    }
    out
}

/// Affine batch normalisation of `(n, c, h, w)` with explicit statistics.
pub fn batchnorm(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = x.to_vec();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out[idx] = (x[idx] - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Per-channel batch mean and biased variance over `(n, h, w)`.
pub fn channel_stats(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h * w).map(move |i| (b * c + ch) * h * w + i))
            .map(|i| x[i])
            .collect();
        mean[ch] = vals.iter().sum::<f64>() / m;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m;
    }
    (mean, var)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Single-head self-attention with residual over `t` tokens of width `d`:
/// `X + softmax(Q Kᵀ / √d) V`, where `Q = X Wqᵀ + bq` and likewise for K, V.
#[allow(clippy::too_many_arguments)]
pub fn attention_residual(
    x: &[f64],
    t: usize,
    d: usize,
    wq: &[f64],
    bq: &[f64],
    wk: &[f64],
    bk: &[f64],
    wv: &[f64],
    bv: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let proj = |w: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for o in 0..d {
                let mut s = b[o];
                for k in 0..d {
                    s += x[i * d + k] * w[o * d + k];
                }
                out[i * d + o] = s;
            }
        }
        out
    };
    let (q, k, v) = (proj(wq, bq), proj(wk, bk), proj(wv, bv));
    let mut weights = vec![0.0; t * t];
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for j in 0..t {
            weights[i * t + j] = (scores[j] - m).exp() / z;
        }
    }
    let mut out = x.to_vec();
    for i in 0..t {
        for c in 0..d {
            for j in 0..t {
                out[i * d + c] += weights[i * t + j] * v[j * d + c];
            }
        }
    }
    (out, weights)
}

/// Adam on one scalar parameter for the given gradient sequence.
pub fn adam_scalar(x0: f64, grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
    let (mut m, mut v, mut x) = (0.0, 0.0, x0);
    let mut trace = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let mhat = m / (1.0 - beta1.powi(t));
        let vhat = v / (1.0 - beta2.powi(t));
        x -= lr * mhat / (vhat.sqrt() + eps);
        trace.push(x);
    }
    trace
}
