//! Dense `(n, c, h, w)` tensors and the reverse-mode tape built over them.

mod kernels;
mod tape;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

pub use kernels::{bilinear_taps, BilinearTap};
pub use tape::{BackwardFn, Graph, Var};

/// Four-dimensional extent `[n, c, h, w]`, row-major.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }

    /// Shape with every axis flagged in `axes` collapsed to 1.
    pub fn reduced(&self, axes: Axes) -> Shape {
        let mut out = self.0;
        for (d, flag) in out.iter_mut().zip(axes.0) {
            if flag {
                *d = 1;
            }
        }
        Shape(out)
    }

    /// Singleton-axis broadcast of two shapes.
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0; 4];
        for i in 0..4 {
            let (a, b) = (self.0[i], other.0[i]);
            out[i] = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return None;
            };
        }
        Some(Shape(out))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d)
    }
}

/// Set of axes a reduction runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Axes(pub [bool; 4]);

impl Axes {
    pub const ALL: Axes = Axes([true; 4]);
    /// Spatial axes `h, w`.
    pub const SPATIAL: Axes = Axes([false, false, true, true]);
    /// Everything except the batch axis.
    pub const PER_ITEM: Axes = Axes([false, true, true, true]);
    pub const LAST: Axes = Axes([false, false, false, true]);
    pub const ROWS: Axes = Axes([false, false, true, false]);

    pub fn count(&self, shape: &Shape) -> usize {
        shape
            .0
            .iter()
            .zip(self.0)
            .filter(|(_, f)| *f)
            .map(|(d, _)| *d)
            .product()
    }
}

/// A dense 64-bit tensor with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "Tensor::new",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let shape = shape.into();
        let [sn, sc, sh, sw] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sn {
            for c in 0..sc {
                for h in 0..sh {
                    for w in 0..sw {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != Shape::SCALAR {
            return Err(Error::Contract(format!(
                "item() on non-scalar shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("gradient of {} values for shape {:?}", g.len(), self.shape),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("data", &Preview(&self.data))
            .finish()
    }
}

struct Preview<'a>(&'a [f64]);

impl fmt::Debug for Preview<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let mut list = f.debug_list();
        list.entries(self.0.iter().take(SHOWN));
        if self.0.len() > SHOWN {
            list.entry(&format_args!("... {} more", self.0.len() - SHOWN));
        }
        list.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_shape() {
        assert!(Tensor::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn reshape_round_trips_bitwise() {
        let t = Tensor::from_fn([1, 2, 3, 4], |n, c, h, w| {
            (n + 3 * c) as f64 * 0.1 + (h * 4 + w) as f64 / 7.0
        });
        let flat = t.reshape([1, 1, 1, 24]).unwrap();
        let back = flat.reshape([1, 2, 3, 4]).unwrap();
        assert_eq!(
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(t.reshape([1, 1, 5, 5]).is_err());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::zeros([1, 1, 1, 2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(2, 3, 4, 4);
        assert_eq!(a.broadcast(&Shape::new(2, 3, 1, 1)), Some(a));
        assert_eq!(Shape::new(1, 3, 1, 4).broadcast(&Shape::new(2, 1, 5, 4)), Some(Shape::new(2, 3, 5, 4)));
        assert_eq!(a.broadcast(&Shape::new(2, 2, 4, 4)), None);
    }
}
