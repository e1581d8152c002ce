//! Datasets, the training harness, file formats and the command-line
//! front end for widen / reparameterize / single-shot shrink.
//!
//! The computational core lives in [`lwdna_core`]; this crate adds IO.

pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod data;
pub mod error;
pub mod report;
pub mod train;

pub use error::{Error, Result};
