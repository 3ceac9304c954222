//! Outer-optimizer laboratory for adversarial training.
//!
//! Implements momentum SGD, gradient-norm clipping, normalized SGD,
//! example-normalized SGD (ENGM), its fixed-norm variant and the fast
//! regression-based approximations, together with the PGD/DeepFool
//! machinery and gradient statistics needed to compare them on small
//! models.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ad;
pub mod attacks;
pub mod data;
pub mod fast_engm;
pub mod harness;
pub mod models;
pub mod optim;
pub mod stats;
pub mod tensor;

pub use ad::{AdError, Graph, ParamVector, PerExampleGrads};
pub use data::Dataset;
pub use models::{LossKind, ModelSpec};
pub use tensor::Tensor;
