//! Cross-modality fusion of aligned RGB and depth stage features.
//!
//! [`Hosf`] builds an `hw × hw` spatial correlation between the two
//! streams, compresses it with a signed square root and per-row l2
//! normalisation, and uses it to re-aggregate the RGB features, gated per
//! channel by a weight derived from the globally max-pooled depth map.
//!
//! [`Hocf`] forms the `C × C` outer product of the two pooled channel
//! descriptors, max-pools it along rows and columns, and turns the result
//! into a per-channel gate on the depth features.
//!
//! Both add their modulation term to the aligned RGB features.

use alloc::format;

use crate::encoders::ConvBnRelu;
use crate::nn::init::InitRng;
use crate::nn::{global_avg_pool, global_max_pool, strided_max_pool, Conv2d, Linear, ParamStore, Pass, PoolDirection};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

pub const NORM_EPS: f64 = 1e-12;

/// Element-wise signed square root, `sign(x)·|x|^(1/2)`.
pub fn moment_normalize(g: &mut Graph, x: Var) -> Var {
    g.signed_sqrt(x)
}

/// Divides every row of the trailing matrix by its Euclidean norm plus
/// [`NORM_EPS`].
pub fn l2_normalize(g: &mut Graph, x: Var) -> Var {
    g.l2_normalize_rows(x, NORM_EPS)
}

/// Per-stream 1×1 conv → BN → ReLU bringing both inputs to the fusion width.
#[derive(Clone, Debug)]
pub struct AlignOp {
    pub rgb: ConvBnRelu,
    pub depth: ConvBnRelu,
    pub width: usize,
}

impl AlignOp {
    pub fn new(store: &mut ParamStore, name: &str, c_rgb: usize, c_depth: usize, width: usize, rng: &mut InitRng) -> Self {
        AlignOp {
            rgb: ConvBnRelu::new(store, &format!("{name}.align_rgb"), c_rgb, width, 1, 1, 0, rng),
            depth: ConvBnRelu::new(store, &format!("{name}.align_depth"), c_depth, width, 1, 1, 0, rng),
            width,
        }
    }

    pub fn forward(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<(Var, Var)> {
        let (a, b) = (p.graph.shape(f_rgb), p.graph.shape(f_depth));
        if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
            return Err(Error::dim(
                "fusion",
                format!("rgb features {:?} and depth features {:?} differ spatially", a, b),
            ));
        }
        Ok((self.rgb.forward(p, f_rgb)?, self.depth.forward(p, f_depth)?))
    }
}

/// Spatial high-order fusion.
#[derive(Clone, Debug)]
pub struct Hosf {
    pub align: AlignOp,
    pub dw1: Conv2d,
    pub dw2: Conv2d,
}

/// Intermediate tensors of one spatial fusion evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HosfParts {
    pub f_rgb: Var,
    pub f_depth: Var,
    pub a_sp: Var,
    pub f_dw: Var,
    pub out: Var,
}

impl Hosf {
    pub fn new(store: &mut ParamStore, name: &str, c_rgb: usize, c_depth: usize, width: usize, rng: &mut InitRng) -> Self {
        Hosf {
            align: AlignOp::new(store, name, c_rgb, c_depth, width, rng),
            dw1: Conv2d::same(store, &format!("{name}.dw1"), width, width, 3, rng),
            dw2: Conv2d::same(store, &format!("{name}.dw2"), width, width, 3, rng),
        }
    }

    pub fn forward(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<Var> {
        Ok(self.forward_parts(p, f_rgb, f_depth)?.out)
    }

    pub fn forward_parts(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<HosfParts> {
        let (fr, fd) = self.align.forward(p, f_rgb, f_depth)?;
        self.fuse_aligned(p, fr, fd)
    }

    /// Fusion of features already at the fusion width.
    pub fn fuse_aligned(&self, p: &mut Pass, fr: Var, fd: Var) -> Result<HosfParts> {
        let s = p.graph.shape(fr);
        if p.graph.shape(fd) != s {
            return Err(Error::dim(
                "hosf_forward",
                format!("aligned shapes {:?} and {:?} differ", s, p.graph.shape(fd)),
            ));
        }
        let (n, c, hw) = (s.n(), s.c(), s.h() * s.w());
        let r = p.graph.reshape(fr, [n, 1, c, hw])?;
        let d = p.graph.reshape(fd, [n, 1, c, hw])?;
        let rt = p.graph.transpose(r);
        let corr = p.graph.matmul(rt, d)?;
        let corr = moment_normalize(p.graph, corr);
        let corr = l2_normalize(p.graph, corr);
        let agg = p.graph.matmul(corr, rt)?;
        let agg = p.graph.transpose(agg);
        let a_sp = p.graph.reshape(agg, s)?;

        let pooled = global_max_pool(p.graph, fd)?;
        let y = self.dw1.forward(p, pooled)?;
        let y = self.dw2.forward(p, y)?;
        let f_dw = p.sigmoid(y);

        let gated = p.graph.mul(a_sp, f_dw)?;
        let out = p.graph.add(gated, fr)?;
        Ok(HosfParts {
            f_rgb: fr,
            f_depth: fd,
            a_sp,
            f_dw,
            out,
        })
    }
}

/// Channel high-order fusion.
#[derive(Clone, Debug)]
pub struct Hocf {
    pub align: AlignOp,
    pub fc: Linear,
    /// Puts the column maxima ahead of the row maxima in the descriptor.
    pub swap_pools: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct HocfParts {
    pub f_rgb: Var,
    pub f_depth: Var,
    /// `(n, 1, C, C)`
    pub a_ch: Var,
    /// `(n, C, 1, 1)`
    pub att: Var,
    pub out: Var,
}

impl Hocf {
    pub fn new(store: &mut ParamStore, name: &str, c_rgb: usize, c_depth: usize, width: usize, rng: &mut InitRng) -> Self {
        Hocf {
            align: AlignOp::new(store, name, c_rgb, c_depth, width, rng),
            fc: Linear::new(store, &format!("{name}.fc"), 2 * width, width, rng),
            swap_pools: false,
        }
    }

    pub fn forward(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<Var> {
        Ok(self.forward_parts(p, f_rgb, f_depth)?.out)
    }

    pub fn forward_parts(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<HocfParts> {
        let (fr, fd) = self.align.forward(p, f_rgb, f_depth)?;
        self.fuse_aligned(p, fr, fd)
    }

    pub fn fuse_aligned(&self, p: &mut Pass, fr: Var, fd: Var) -> Result<HocfParts> {
        let s = p.graph.shape(fr);
        let (n, c) = (s.n(), s.c());
        if self.fc.in_dim != 2 * c || self.fc.out_dim != c {
            return Err(Error::Config(format!(
                "fc is {}->{} but the fusion width is {c}",
                self.fc.in_dim, self.fc.out_dim
            )));
        }
        let a_rgb = global_avg_pool(p.graph, fr)?;
        let a_dep = global_avg_pool(p.graph, fd)?;
        let col = p.graph.reshape(a_rgb, [n, 1, c, 1])?;
        let row = p.graph.reshape(a_dep, [n, 1, 1, c])?;
        let a_ch = p.graph.matmul(col, row)?;

        let rows = strided_max_pool(p.graph, a_ch, PoolDirection::Rows)?;
        let rows = p.graph.reshape(rows, [n, 1, 1, c])?;
        let cols = strided_max_pool(p.graph, a_ch, PoolDirection::Cols)?;
        let desc = if self.swap_pools {
            p.graph.concat(&[cols, rows], 3)?
        } else {
            p.graph.concat(&[rows, cols], 3)?
        };
        let z = self.fc.forward(p, desc)?;
        let att = p.sigmoid(z);
        let att = p.graph.reshape(att, [n, c, 1, 1])?;

        let gated = p.graph.mul(att, fd)?;
        let out = p.graph.add(gated, fr)?;
        Ok(HocfParts {
            f_rgb: fr,
            f_depth: fd,
            a_ch,
            att,
            out,
        })
    }
}

/// Plain concatenation fusion used to ablate either high-order block:
/// `ReLU(BN(Conv1×1(Cat(f_rgb, f_depth))))` on the aligned features.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub align: AlignOp,
    pub merge: ConvBnRelu,
}

impl ConcatFusion {
    pub fn new(store: &mut ParamStore, name: &str, c_rgb: usize, c_depth: usize, width: usize, rng: &mut InitRng) -> Self {
        ConcatFusion {
            align: AlignOp::new(store, name, c_rgb, c_depth, width, rng),
            merge: ConvBnRelu::new(store, &format!("{name}.merge"), 2 * width, width, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<Var> {
        let (fr, fd) = self.align.forward(p, f_rgb, f_depth)?;
        let cat = p.graph.concat(&[fr, fd], 1)?;
        self.merge.forward(p, cat)
    }
}

/// The fusion block used at one stage.
#[derive(Clone, Debug)]
pub enum StageFusion {
    Spatial(Hosf),
    Channel(Hocf),
    Concat(ConcatFusion),
}

impl StageFusion {
    pub fn forward(&self, p: &mut Pass, f_rgb: Var, f_depth: Var) -> Result<Var> {
        match self {
            StageFusion::Spatial(b) => b.forward(p, f_rgb, f_depth),
            StageFusion::Channel(b) => b.forward(p, f_rgb, f_depth),
            StageFusion::Concat(b) => b.forward(p, f_rgb, f_depth),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn moment_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 1, 1, 3], vec![4.0, -4.0, 0.0]).unwrap());
        let y = moment_normalize(&mut g, x);
        assert_eq!(g.value(y).data(), &[2.0, -2.0, 0.0]);
    }

    #[test]
    fn row_normalisation() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([1, 1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = l2_normalize(&mut g, x);
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn fc_width_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = crate::nn::init::rng(0);
        let block = Hocf::new(&mut store, "f", 4, 4, 4, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 2, 2]));
        let mut p = Pass::new(&mut g, &mut store, Mode::Eval);
        assert!(matches!(block.fuse_aligned(&mut p, x, x), Err(Error::Config(_))));
    }
}
