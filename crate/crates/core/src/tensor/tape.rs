use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, bilinear_taps, ConvGeom};
use super::{Axes, Shape, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: `(input, output, grad_output, grad_input)`.
/// `grad_input` arrives zeroed.
pub type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[f64], &mut [f64])>;

/// Smallest magnitude used in the signed-square-root derivative; the true
/// derivative is unbounded at zero.
pub const SIGNED_SQRT_GRAD_FLOOR: f64 = 1e-8;

/// Divisors with magnitude below this are rejected by [`Graph::div`].
pub const MIN_DIVISOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryOp {
    AddScalar,
    MulScalar(f64),
    Exp,
    Ln,
    Sigmoid,
    Relu,
    SignedSqrt,
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceOp {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce {
        op: ReduceOp,
        x: Var,
        axes: Axes,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Upsample(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax(Var),
    L2Rows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Custom {
        x: Var,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order; node parents always precede the
/// node, so a reverse sweep is a valid topological traversal.
///
/// Leaf gradients accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    tags: BTreeMap<usize, Var>,
}

/// Per-operand strides in output index space (0 on broadcast axes).
fn broadcast_strides(src: Shape, out: Shape) -> [usize; 4] {
    let s = src.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if src.0[i] == out.0[i] { s[i] } else { 0 };
    }
    r
}

fn for_each_broadcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    };
    // keep the open interval (0, 1) representable
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it takes part in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn input(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Leaf registered under an external key (a parameter id). Registering
    /// the same key twice returns the first variable.
    pub fn tagged_leaf(&mut self, tag: usize, t: &Tensor, requires_grad: bool) -> Var {
        if let Some(v) = self.tags.get(&tag) {
            return *v;
        }
        let mut value = t.clone();
        value.set_requires_grad(false);
        let v = self.push(value, Op::Leaf, requires_grad);
        self.tags.insert(tag, v);
        v
    }

    /// Tagged leaves in tag order.
    pub fn tagged(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.tags.iter().map(|(k, v)| (*k, *v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = sa.broadcast(&sb).ok_or_else(|| {
            Error::dim(
                "elementwise",
                format!("{:?} {:?} and {:?} do not broadcast", op, sa, sb),
            )
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if op == BinaryOp::Div {
            if let Some(bad) = bv.iter().find(|v| libm::fabs(**v) < MIN_DIVISOR) {
                return Err(Error::NearZeroDivisor(*bad, "div"));
            }
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
            BinaryOp::Max => |x: f64, y: f64| if x >= y { x } else { y },
        };
        let mut data = vec![0.0; out.numel()];
        if sa == sb {
            for ((d, x), y) in data.iter_mut().zip(av).zip(bv) {
                *d = f(*x, *y);
            }
        } else {
            for_each_broadcast(out, broadcast_strides(sa, out), broadcast_strides(sb, out), |o, ia, ib| {
                data[o] = f(av[ia], bv[ib]);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out, data)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, op: UnaryOp, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Unary(op, x), rg)
    }

    /// `x + s`. Adding exactly zero reproduces `x` bitwise.
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryOp::AddScalar, x, |v| v + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryOp::MulScalar(s), x, |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x, libm::exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Contract(format!("ln of non-positive value {bad}")));
        }
        Ok(self.unary(UnaryOp::Ln, x, libm::log))
    }

    /// Logistic function; outputs stay strictly inside `(0, 1)`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `sign(x)·|x|^(1/2)`.
    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::SignedSqrt, x, |v| {
            if v > 0.0 {
                libm::sqrt(v)
            } else if v < 0.0 {
                -libm::sqrt(-v)
            } else {
                0.0
            }
        })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryOp::Clamp(lo, hi), x, |v| v.clamp(lo, hi))
    }

    // ------------------------------------------------------------ reductions

    fn reduce(&mut self, op: ReduceOp, x: Var, axes: Axes) -> Result<Var> {
        let shape = self.shape(x);
        if shape.numel() == 0 || axes.count(&shape) == 0 {
            return Err(Error::dim("reduce", format!("empty reduction over {:?}", shape)));
        }
        let out = shape.reduced(axes);
        let so = broadcast_strides(out, shape);
        let xv = self.value(x).data();
        let mut data = vec![
            match op {
                ReduceOp::Max => f64::NEG_INFINITY,
                _ => 0.0,
            };
            out.numel()
        ];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for_each_broadcast(shape, shape.strides(), so, |i, _, o| data[o] += xv[i]);
                if op == ReduceOp::Mean {
                    let count = axes.count(&shape) as f64;
                    data.iter_mut().for_each(|v| *v /= count);
                }
            }
            ReduceOp::Max => {
                argmax = vec![usize::MAX; out.numel()];
                // row-major visit order + strict comparison keeps the first argmax
                for_each_broadcast(shape, shape.strides(), so, |i, _, o| {
                    if argmax[o] == usize::MAX || xv[i] > data[o] {
                        data[o] = xv[i];
                        argmax[o] = i;
                    }
                });
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out, data)?,
            Op::Reduce { op, x, axes, argmax },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axes)
    }

    /// Maximum over `axes`; the gradient goes to the first (lowest linear
    /// index) maximiser.
    pub fn max(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(ReduceOp::Max, x, axes)
    }

    // --------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes: `(n, c, h, w) -> (n, c, w, h)`.
    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape().0;
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n * c {
            let base = b * h * w;
            for i in 0..h {
                for j in 0..w {
                    data[base + j * h + i] = src[base + i * w + j];
                }
            }
        }
        let value = Tensor::new([n, c, w, h], data).expect("same count");
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Concatenation along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 3 {
            return Err(Error::dim("concat", "need at least one part and axis < 4"));
        }
        let first = self.shape(parts[0]);
        let mut out = first;
        out.0[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            for i in 0..4 {
                if i != axis && s.0[i] != first.0[i] {
                    return Err(Error::dim(
                        "concat",
                        format!("{:?} vs {:?} along axis {}", first, s, axis),
                    ));
                }
            }
            out.0[axis] += s.0[axis];
        }
        let outer: usize = out.0[..axis].iter().product();
        let inner: usize = out.0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out.numel());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape().0[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(out, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // --------------------------------------------------------------- linear

    /// Batched matrix product over the last two axes. The leading two axes
    /// broadcast along singletons.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let [a0, a1, m, k] = sa.0;
        let [b0, b1, k2, n] = sb.0;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", sa, sb),
            ));
        }
        let batch = Shape::new(a0, a1, 1, 1)
            .broadcast(&Shape::new(b0, b1, 1, 1))
            .ok_or_else(|| Error::dim("matmul", format!("batch axes of {:?} and {:?}", sa, sb)))?;
        let out = Shape::new(batch.0[0], batch.0[1], m, n);
        let mut data = vec![0.0; out.numel()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for (oi, ai, bi) in batch_pairs(sa, sb, batch) {
            gemm_slot(av, bv, &mut data, oi, ai, bi, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out, data)?, Op::MatMul(a, b), rg))
    }

    /// 2-D cross-correlation with zero padding. `w` is `(out, in, k, k)`,
    /// `b` holds `out` values.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let [n, cin, h, wd] = sx.0;
        let [cout, win, kh, kw] = sw.0;
        if win != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", cin, win),
            ));
        }
        if kh != kw || kh == 0 || stride == 0 {
            return Err(Error::dim("conv2d", format!("unsupported kernel {:?} / stride {}", sw, stride)));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("kernel {} larger than padded input {:?}", kh, sx)));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::dim("conv2d", "bias length differs from output channels"));
            }
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = Shape::new(n, cout, geom.out_h, geom.out_w);
        let plane = geom.col_cols();
        let mut data = vec![0.0; out.numel()];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { geom.col_rows() * plane }];
        let img = cin * h * wd;
        for i in 0..n {
            let src = &xv[i * img..(i + 1) * img];
            let cols: &[f64] = if geom.is_pointwise() {
                src
            } else {
                kernels::im2col(src, &geom, &mut col);
                &col
            };
            let dst = &mut data[i * cout * plane..(i + 1) * cout * plane];
            kernels::gemm_acc(wv, cols, dst, cout, geom.col_rows(), plane);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, row) in dst.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(out, data)?,
            Op::Conv { x, w, b, stride, pad },
            rg,
        ))
    }

    /// Per-channel standardisation with batch statistics over `(n, h, w)`.
    /// Returns the normalised variable together with the batch mean and the
    /// biased batch variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape().0;
        let count = n * h * w;
        if count == 0 {
            return Err(Error::dim("batch_norm", "empty batch"));
        }
        let xv = t.data();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                s += xv[off..off + plane].iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut q = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                q += xv[off..off + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut data = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    data[j] = (xv[j] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let shape = t.shape();
        let rg = self.rg(x);
        let v = self.push(Tensor::new(shape, data)?, Op::BatchNorm { x, inv_std }, rg);
        Ok((v, mean, var))
    }

    /// Bilinear resize to `(out_h, out_w)` with half-pixel centres.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.shape().0;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "upsample_bilinear",
                format!("cannot resize {:?} to {}x{}", t.shape(), out_h, out_w),
            ));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xv = t.data();
        let mut data = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, yt) in ty.iter().enumerate() {
                let (r0, r1) = (&src[yt.lo * w..(yt.lo + 1) * w], &src[yt.hi * w..(yt.hi + 1) * w]);
                for (ox, xt) in tx.iter().enumerate() {
                    let top = r0[xt.lo] * (1.0 - xt.frac) + r0[xt.hi] * xt.frac;
                    let bot = r1[xt.lo] * (1.0 - xt.frac) + r1[xt.hi] * xt.frac;
                    dst[oy * out_w + ox] = top * (1.0 - yt.frac) + bot * yt.frac;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, c, out_h, out_w], data)?, Op::Upsample(x), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = t.shape().w();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Divides every last-axis row by `(‖row‖₂ + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let w = t.shape().w().max(1);
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / w);
        for row in data.chunks_mut(w) {
            let r = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            norms.push(r);
            row.iter_mut().for_each(|v| *v /= r + eps);
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::L2Rows { x, eps, norms }, rg)
    }

    /// Records an op with caller-supplied forward value and backward rule.
    /// The output may have any shape; the rule receives its gradient and
    /// fills one of the input's length.
    pub fn custom(&mut self, x: Var, value: Tensor, backward: BackwardFn) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Contract("custom op produced non-finite values".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Custom { x, backward }, rg))
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a `(1,1,1,1)` root. Gradients of leaves that
    /// require them are added to their accumulated buffers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != Shape::SCALAR {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            for (parent, pg) in self.node_backward(id, &g) {
                add_into(&mut grads[parent.0], pg);
            }
        }
        Ok(())
    }
}

fn batch_pairs(sa: Shape, sb: Shape, batch: Shape) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::with_capacity(batch.0[0] * batch.0[1]);
    for i0 in 0..batch.0[0] {
        for i1 in 0..batch.0[1] {
            let oi = i0 * batch.0[1] + i1;
            let ai = (if sa.0[0] == 1 { 0 } else { i0 }) * sa.0[1] + if sa.0[1] == 1 { 0 } else { i1 };
            let bi = (if sb.0[0] == 1 { 0 } else { i0 }) * sb.0[1] + if sb.0[1] == 1 { 0 } else { i1 };
            v.push((oi, ai, bi));
        }
    }
    v
}

#[allow(clippy::too_many_arguments)]
fn gemm_slot(av: &[f64], bv: &[f64], out: &mut [f64], oi: usize, ai: usize, bi: usize, m: usize, k: usize, n: usize) {
    kernels::gemm_acc(
        &av[ai * m * k..(ai + 1) * m * k],
        &bv[bi * k * n..(bi + 1) * k * n],
        &mut out[oi * m * n..(oi + 1) * m * n],
        m,
        k,
        n,
    );
}

impl Graph {
    /// Gradients of node `id`'s parents given the gradient `g` of its output.
    /// Parents that do not require gradients are skipped.
    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (av, bv) = (ta.data(), tb.data());
                let (sa, sb, so) = (ta.shape(), tb.shape(), node.value.shape());
                let mut ga = self.rg(*a).then(|| vec![0.0; av.len()]);
                let mut gb = self.rg(*b).then(|| vec![0.0; bv.len()]);
                for_each_broadcast(so, broadcast_strides(sa, so), broadcast_strides(sb, so), |o, ia, ib| {
                    let (x, z, d) = (av[ia], bv[ib], g[o]);
                    let (da, db) = match op {
                        BinaryOp::Add => (d, d),
                        BinaryOp::Sub => (d, -d),
                        BinaryOp::Mul => (d * z, d * x),
                        BinaryOp::Div => (d / z, -d * x / (z * z)),
                        BinaryOp::Max => {
                            if x >= z {
                                (d, 0.0)
                            } else {
                                (0.0, d)
                            }
                        }
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Unary(op, x) => {
                let xv = self.value(*x).data();
                let gx = xv
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&xi, &yi), &d)| match op {
                        UnaryOp::AddScalar => d,
                        UnaryOp::MulScalar(s) => d * s,
                        UnaryOp::Exp => d * yi,
                        UnaryOp::Ln => d / xi,
                        UnaryOp::Sigmoid => d * yi * (1.0 - yi),
                        UnaryOp::Relu => {
                            if xi > 0.0 {
                                d
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::SignedSqrt => {
                            d * 0.5 / libm::sqrt(libm::fabs(xi).max(SIGNED_SQRT_GRAD_FLOOR))
                        }
                        UnaryOp::Clamp(lo, hi) => {
                            if xi >= *lo && xi <= *hi {
                                d
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                out.push((*x, gx));
            }
            Op::Reduce { op, x, axes, argmax } => {
                let shape = self.shape(*x);
                let mut gx = vec![0.0; shape.numel()];
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let scale = if *op == ReduceOp::Mean {
                            1.0 / axes.count(&shape) as f64
                        } else {
                            1.0
                        };
                        let so = broadcast_strides(shape.reduced(*axes), shape);
                        for_each_broadcast(shape, shape.strides(), so, |i, _, o| gx[i] = g[o] * scale);
                    }
                    ReduceOp::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gx[i] += g[o];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Transpose(x) => {
                // output is (n, c, w, h); route back to (n, c, h, w)
                let [n, c, w, h] = node.value.shape().0;
                let mut gx = vec![0.0; g.len()];
                for b in 0..n * c {
                    let base = b * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            gx[base + i * w + j] = g[base + j * h + i];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let [_, _, m, k] = sa.0;
                let n = sb.0[3];
                let so = node.value.shape();
                let batch = Shape::new(so.0[0], so.0[1], 1, 1);
                let mut ga = self.rg(*a).then(|| vec![0.0; ta.numel()]);
                let mut gb = self.rg(*b).then(|| vec![0.0; tb.numel()]);
                for (oi, ai, bi) in batch_pairs(sa, sb, batch) {
                    let gs = &g[oi * m * n..(oi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        kernels::gemm_nt_acc(
                            gs,
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[ai * m * k..(ai + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        kernels::gemm_tn_acc(
                            &ta.data()[ai * m * k..(ai + 1) * m * k],
                            gs,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Conv { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let [n, cin, h, wd] = tx.shape().0;
                let [cout, _, k, _] = tw.shape().0;
                let so = node.value.shape();
                let geom = ConvGeom {
                    channels: cin,
                    height: h,
                    width: wd,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                    out_h: so.h(),
                    out_w: so.w(),
                };
                let plane = geom.col_cols();
                let rows = geom.col_rows();
                let img = cin * h * wd;
                let mut gx = self.rg(*x).then(|| vec![0.0; tx.numel()]);
                let mut gw = self.rg(*w).then(|| vec![0.0; tw.numel()]);
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { rows * plane }];
                let mut gcol = vec![0.0; if geom.is_pointwise() || gx.is_none() { 0 } else { rows * plane }];
                for i in 0..n {
                    let gs = &g[i * cout * plane..(i + 1) * cout * plane];
                    let src = &tx.data()[i * img..(i + 1) * img];
                    if let Some(gw) = gw.as_mut() {
                        let cols: &[f64] = if geom.is_pointwise() {
                            src
                        } else {
                            kernels::im2col(src, &geom, &mut col);
                            &col
                        };
                        kernels::gemm_nt_acc(gs, cols, gw, cout, plane, rows);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[i * img..(i + 1) * img];
                        if geom.is_pointwise() {
                            kernels::gemm_tn_acc(tw.data(), gs, dst, rows, cout, plane);
                        } else {
                            gcol.iter_mut().for_each(|v| *v = 0.0);
                            kernels::gemm_tn_acc(tw.data(), gs, &mut gcol, rows, cout, plane);
                            kernels::col2im_acc(&gcol, &geom, dst);
                        }
                    }
                }
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut gb = vec![0.0; cout];
                    for i in 0..n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let off = (i * cout + co) * plane;
                            *acc += g[off..off + plane].iter().sum::<f64>();
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::BatchNorm { x, inv_std } => {
                let [n, c, h, w] = node.value.shape().0;
                let plane = h * w;
                let count = (n * plane) as f64;
                let mut gx = vec![0.0; g.len()];
                for ch in 0..c {
                    let (mut sg, mut sgy) = (0.0, 0.0);
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for j in off..off + plane {
                            sg += g[j];
                            sgy += g[j] * y[j];
                        }
                    }
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for j in off..off + plane {
                            gx[j] = inv_std[ch] / count * (count * g[j] - sg - y[j] * sgy);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Upsample(x) => {
                let [n, c, h, w] = self.shape(*x).0;
                let [_, _, oh, ow] = node.value.shape().0;
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, yt) in ty.iter().enumerate() {
                        for (ox, xt) in tx.iter().enumerate() {
                            let d = src[oy * ow + ox];
                            let (top, bot) = (d * (1.0 - yt.frac), d * yt.frac);
                            dst[yt.lo * w + xt.lo] += top * (1.0 - xt.frac);
                            dst[yt.lo * w + xt.hi] += top * xt.frac;
                            dst[yt.hi * w + xt.lo] += bot * (1.0 - xt.frac);
                            dst[yt.hi * w + xt.hi] += bot * xt.frac;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Concat { parts, axis } => {
                let so = node.value.shape();
                let outer: usize = so.0[..*axis].iter().product();
                let inner: usize = so.0[*axis + 1..].iter().product();
                let total = so.0[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p).0[*axis] * inner;
                    if self.rg(*p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        out.push((*p, gp));
                    }
                    offset += chunk;
                }
            }
            Op::Softmax(x) => {
                let w = node.value.shape().w().max(1);
                let mut gx = vec![0.0; g.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::L2Rows { x, eps, norms } => {
                let xv = self.value(*x).data();
                let w = node.value.shape().w().max(1);
                let mut gx = vec![0.0; g.len()];
                for (r, ((xr, gr), dr)) in xv.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)).enumerate() {
                    let nrm = norms[r];
                    let den = nrm + eps;
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = if nrm > 0.0 { dot / (nrm * den * den) } else { 0.0 };
                    for ((d, xi), gi) in dr.iter_mut().zip(xr).zip(gr) {
                        *d = gi / den - xi * k;
                    }
                }
                out.push((*x, gx));
            }
            Op::Custom { x, backward } => {
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; xv.len()];
                backward(xv, y, g, &mut gx);
                out.push((*x, gx));
            }
        }
        out
    }
}
