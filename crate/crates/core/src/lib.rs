//! Differentiable architecture search over a single-path supernet.
//!
//! Every searchable layer holds one 5×5, 6×-expansion depthwise superkernel;
//! its candidate operations (3×3 or 5×5 kernel, expansion 3 or 6, or skip)
//! are weight subsets chosen by thresholded group norms. Thresholds are
//! trained jointly with the weights against cross-entropy plus a
//! differentiable runtime prediction, then read off as a discrete network.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

// `!(x > 0)` style checks are there to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod latency;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod search;
pub mod space;
pub mod superkernel;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use latency::LatencyTable;
pub use scalar::Scalar;
pub use search::{run_search, SearchConfig};
pub use space::{DerivedArchitecture, MacroArchConfig};
pub use superkernel::{DecisionTriple, GateMode, LayerChoice};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Supernet64 = space::Supernet<f64>;
pub type Supernet32 = space::Supernet<f32>;
pub type CompactNetwork64 = space::CompactNetwork<f64>;
pub type CompactNetwork32 = space::CompactNetwork<f32>;
