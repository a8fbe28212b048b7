//! Files and processes around `svrnn-core`: the line-delimited JSON dataset
//! format, binary checkpoints, logged training runs, reports and the
//! `svrnn` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod folds;
pub mod format;
pub mod report;
pub mod run;

pub use svrnn_core as core;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
