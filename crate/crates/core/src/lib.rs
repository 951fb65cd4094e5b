//! Sparse network training with L0 regularization through hard concrete gates.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small define-by-run reverse-mode engine over [`Tensor`]s.
//! * [`gates`]: binary, stretched and hard concrete distributions.
//! * [`objective`]: expected-L0 complexity, gate-aware L2 and the gate KL term.
//! * [`net`]: gated dense layers, deterministic pruning and expected FLOPs.
//! * [`train`]: Adam with temporal averaging, minibatching and metrics.
//! * [`data`]: IDX loading and synthetic sparse regression.
//! * [`bayes`]: spike-and-slab diagnostics and rectified KL tooling.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bayes;
pub mod data;
pub mod gates;
pub mod net;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

pub use rng::RngStream;
pub use tensor::Tensor;
