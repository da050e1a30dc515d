//! In-place test-time training for gated-MLP transformers.
//!
//! The MLP down projection doubles as a fast weight that is updated chunk by
//! chunk with a next-token-aligned target. This crate holds the layer itself
//! ([`ttt`]), a small decoder-only host model ([`model`]), training and
//! checkpointing ([`training`]) and the experiments that check the mechanism
//! ([`experiments`]).

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod training;
pub mod ttt;

pub use autodiff::{grad_check, GradCheckConfig, GradientReport, Gradients, Tape, TapeOp, Var};
pub use numerics::{ConvSpec, RealMatrix, SeededRng};
pub use ttt::{BoundaryMask, FastWeightState, ScanMode, TttLayerConfig, TttLayerParams};
