//! Loop versions of the spatial and channel high-order fusion blocks for a
//! single batch item, including channel alignment with eval-mode batch
//! normalisation.

use crate::{relu, sigmoid};

/// 1×1 convolution, batch normalisation with fixed statistics and ReLU.
#[derive(Clone, Debug)]
pub struct Align {
    /// `(out, in)` row-major
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl Align {
    /// `input` is `(cin, hw)`; returns `(cout, hw)`.
    pub fn apply(&self, input: &[f64], cin: usize, hw: usize) -> Vec<f64> {
        let cout = self.bias.len();
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            for p in 0..hw {
                let mut s = self.bias[o];
                for c in 0..cin {
                    s += self.weight[o * cin + c] * input[c * hw + p];
                }
                let bn = (s - self.mean[o]) / (self.var[o] + self.eps).sqrt() * self.gamma[o] + self.beta[o];
                out[o * hw + p] = relu(bn);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Hosf {
    pub rgb: Align,
    pub depth: Align,
    /// `(C, C, 3, 3)`
    pub dw1_weight: Vec<f64>,
    pub dw1_bias: Vec<f64>,
    pub dw2_weight: Vec<f64>,
    pub dw2_bias: Vec<f64>,
    pub norm_eps: f64,
}

/// Spatial fusion output `(C, hw)` for inputs `(c_rgb, hw)` and `(c_depth, hw)`.
pub fn hosf(p: &Hosf, f_rgb_in: &[f64], c_rgb: usize, f_depth_in: &[f64], c_depth: usize, hw: usize) -> Vec<f64> {
    let f_rgb = p.rgb.apply(f_rgb_in, c_rgb, hw);
    let f_dep = p.depth.apply(f_depth_in, c_depth, hw);
    let c = p.rgb.bias.len();

    // spatial correlation, signed square root, per-row l2 normalisation
    let mut corr = vec![vec![0.0; hw]; hw];
    for a in 0..hw {
        for b in 0..hw {
            let mut s = 0.0;
            for ch in 0..c {
                s += f_rgb[ch * hw + a] * f_dep[ch * hw + b];
            }
            corr[a][b] = if s >= 0.0 { s.sqrt() } else { -(-s).sqrt() };
        }
    }
    for row in corr.iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= norm + p.norm_eps;
        }
    }
    let mut a_sp = vec![0.0; c * hw];
    for a in 0..hw {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..hw {
                s += corr[a][b] * f_rgb[ch * hw + b];
            }
            a_sp[ch * hw + a] = s;
        }
    }

    // depth weight: global max, two 3×3 convs on a 1×1 map (centre tap only)
    let gmp: Vec<f64> = (0..c)
        .map(|ch| (0..hw).map(|q| f_dep[ch * hw + q]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let centre = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|o| b[o] + (0..c).map(|i| w[((o * c + i) * 3 + 1) * 3 + 1] * x[i]).sum::<f64>())
            .collect()
    };
    let y1 = centre(&p.dw1_weight, &p.dw1_bias, &gmp);
    let y2 = centre(&p.dw2_weight, &p.dw2_bias, &y1);
    let dw: Vec<f64> = y2.iter().map(|v| sigmoid(*v)).collect();

    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for q in 0..hw {
            out[ch * hw + q] = a_sp[ch * hw + q] * dw[ch] + f_rgb[ch * hw + q];
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Hocf {
    pub rgb: Align,
    pub depth: Align,
    /// `(C, 2C)`
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
    /// Put the column maxima first in the concatenated descriptor.
    pub swap_pools: bool,
}

/// Channel fusion output `(C, hw)` plus the interaction matrix `(C, C)`
/// and the channel attention vector.
pub fn hocf(
    p: &Hocf,
    f_rgb_in: &[f64],
    c_rgb: usize,
    f_depth_in: &[f64],
    c_depth: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f_rgb = p.rgb.apply(f_rgb_in, c_rgb, hw);
    let f_dep = p.depth.apply(f_depth_in, c_depth, hw);
    let c = p.rgb.bias.len();
    let mut a_rgb = vec![0.0; c];
    let mut a_dep = vec![0.0; c];
    for ch in 0..c {
        for q in 0..hw {
            a_rgb[ch] += f_rgb[ch * hw + q];
            a_dep[ch] += f_dep[ch * hw + q];
        }
        a_rgb[ch] /= hw as f64;
        a_dep[ch] /= hw as f64;
    }
    let mut inter = vec![0.0; c * c];
    for j in 0..c {
        for k in 0..c {
            inter[j * c + k] = a_rgb[j] * a_dep[k];
        }
    }
    let mut row_max = vec![f64::NEG_INFINITY; c];
    let mut col_max = vec![f64::NEG_INFINITY; c];
    for j in 0..c {
        for k in 0..c {
            row_max[j] = row_max[j].max(inter[j * c + k]);
            col_max[k] = col_max[k].max(inter[j * c + k]);
        }
    }
    let desc: Vec<f64> = if p.swap_pools {
        col_max.iter().chain(&row_max).copied().collect()
    } else {
        row_max.iter().chain(&col_max).copied().collect()
    };
    let att: Vec<f64> = (0..c)
        .map(|o| {
            let z = p.fc_bias[o] + (0..2 * c).map(|i| p.fc_weight[o * 2 * c + i] * desc[i]).sum::<f64>();
            sigmoid(z)
        })
        .collect();
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for q in 0..hw {
            out[ch * hw + q] = att[ch] * f_dep[ch * hw + q] + f_rgb[ch * hw + q];
        }
    }
    (out, inter, att)
}
