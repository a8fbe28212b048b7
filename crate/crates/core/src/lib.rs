//! Semi-supervised variational recurrent networks.
//!
//! This crate is `no_std` with `alloc` and holds the numerical side of the
//! project: a reverse-mode tape, the recurrent latent-variable cell and its
//! bounds, the task procedures, and a trainer. File formats, checkpoints and
//! the command-line tool live in the `svrnn` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod array;
pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod gradcheck;
mod math;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use array::Array;
pub use autodiff::{GradientSet, ParamId, ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use model::{Mode, Model, ModelSpec, Variant};
