//! High-order RGB-D saliency network at configurable scale.
//!
//! Everything in this crate is pure computation over 64-bit dense tensors:
//! a reverse-mode differentiation tape ([`tensor`]), layers and Adam
//! ([`nn`]), toy two-stream encoders ([`encoders`]), the spatial and
//! channel high-order fusion blocks ([`fusion`]), the cascaded pyramid
//! decoder with deep supervision ([`decoder`]), the hybrid loss
//! ([`loss`]) and the standard salient-object-detection measures
//! ([`metrics`]).
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the
//! command-line front-end and checkpointing live in the `hodinet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub use tensor::{Graph, Shape, Tensor, Var};
pub use decoder::SaliencyOutput;
pub use model::{FusionVariant, Model, ModelConfig};
pub use nn::{Mode, ParamId, ParamStore, Pass};
