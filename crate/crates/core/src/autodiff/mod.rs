//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records operations eagerly: each call computes its value and
//! appends a node, so the node list is always in topological order. Parameters
//! live in a [`ParamSet`] borrowed by the tape; [`Tape::backward`] returns a
//! [`GradientSet`] with one entry per parameter (zeros for unused ones).

mod check;
mod params;
mod tape;

pub use check::{clip_gradients, grad_check};
pub use params::{GradientSet, ParamId, ParamSet};
pub use tape::{Tape, Var};
