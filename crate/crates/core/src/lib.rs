//! WeakTr: a plain vision transformer with one token per class, fine class
//! activation maps from adaptively fused attention, and a segmentation decoder
//! retrained online with gradient clipping.
//!
//! The numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision used by the tools.

pub mod cam;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod vit;

pub use error::{Result, WeakTrError};
pub use graph::{Graph, Var, IGNORE_LABEL};
pub use param::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
