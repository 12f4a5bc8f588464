//! Layers, parameter storage and the optimizer.
//!
//! Parameters live in a [`ParamStore`] and are registered on a [`Graph`]
//! once per forward pass through [`Pass::param`]. After
//! [`Graph::backward`], [`ParamStore::pull_grads`] moves leaf gradients
//! into the store where [`Adam`] consumes them.

mod adam;
mod batchnorm;
mod conv;
pub mod init;
mod linear;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use adam::{decayed_lr, Adam};
pub use batchnorm::{BatchNorm2d, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2d;
pub use linear::Linear;

use crate::tensor::{Axes, Graph, Tensor, Var};
use crate::{Error, Result};

/// Whether batch normalisation uses batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as running statistics; persisted but never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named, ordered collection of every tensor that defines a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let mut tensor = tensor;
        tensor.set_requires_grad(kind == ParamKind::Trainable);
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Tensor by name; panics on unknown names (test helper).
    pub fn named(&self, name: &str) -> &Tensor {
        let id = self.find(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        self.get(id)
    }

    pub fn named_mut(&mut self, name: &str) -> &mut Tensor {
        let id = self.find(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        self.get_mut(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds the gradients of every parameter leaf recorded on `graph` into
    /// the store's gradient buffers.
    pub fn pull_grads(&mut self, graph: &Graph) -> Result<()> {
        for (tag, var) in graph.tagged() {
            let Some(entry) = self.entries.get_mut(tag) else {
                return Err(Error::Contract(format!("graph references unknown parameter {tag}")));
            };
            if let Some(g) = graph.grad(var) {
                entry.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Replaces a tensor's data, keeping its shape.
    pub fn assign(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if t.numel() != data.len() {
            return Err(Error::dim(
                "ParamStore::assign",
                format!("{} values for {:?}", data.len(), t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// One forward evaluation: the tape being recorded, the parameters it
/// reads (and, for running statistics, writes) and the mode.
pub struct Pass<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Pass<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a mut ParamStore, mode: Mode) -> Self {
        Pass { graph, store, mode }
    }

    /// The parameter as a tape leaf; repeated calls reuse the same leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        let entry = &self.store.entries[id.0];
        let rg = entry.kind == ParamKind::Trainable;
        self.graph.tagged_leaf(id.0, &entry.tensor, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.graph.relu(x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.graph.sigmoid(x)
    }
}

/// Spatial mean per channel: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    g.mean(x, Axes::SPATIAL)
}

/// Spatial maximum per channel: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_max_pool(g: &mut Graph, x: Var) -> Result<Var> {
    g.max(x, Axes::SPATIAL)
}

/// Which way a square interaction matrix is max-pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolDirection {
    /// Maximum of every row: `(n, 1, C, C) -> (n, 1, C, 1)`.
    Rows,
    /// Maximum of every column: `(n, 1, C, C) -> (n, 1, 1, C)`.
    Cols,
}

/// Max pooling of a `C×C` matrix view along one direction.
pub fn strided_max_pool(g: &mut Graph, x: Var, dir: PoolDirection) -> Result<Var> {
    let s = g.shape(x);
    if s.h() != s.w() {
        return Err(Error::dim(
            "strided_max_pool",
            format!("expected a square matrix view, got {:?}", s),
        ));
    }
    match dir {
        PoolDirection::Rows => g.max(x, Axes::LAST),
        PoolDirection::Cols => g.max(x, Axes::ROWS),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Scale(usize),
    Target(usize, usize),
}

/// Bilinear upsampling, half-pixel aligned.
pub fn upsample(g: &mut Graph, x: Var, resize: Resize) -> Result<Var> {
    let s = g.shape(x);
    let (h, w) = match resize {
        Resize::Scale(0) => return Err(Error::dim("upsample", "scale must be at least 1")),
        Resize::Scale(k) => (s.h() * k, s.w() * k),
        Resize::Target(h, w) => (h, w),
    };
    g.upsample_bilinear(x, h, w)
}

/// Bilinear resize of a plain tensor, outside any tape.
pub fn resize(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if (s.h(), s.w()) == (h, w) {
        return Ok(t.clone());
    }
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = g.upsample_bilinear(x, h, w)?;
    Ok(g.value(y).clone())
}
