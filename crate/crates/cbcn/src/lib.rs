//! File formats, data loading and the command-line front end for
//! [`cbcn_core`].
//!
//! - [`config`]: `key = value` training configuration.
//! - [`checkpoint`]: resumable training state and the packed export format.
//! - [`dataset`]: IDX files on disk and the MNIST-rot variant.
//! - [`metrics`], [`manifest`]: per-epoch CSV and the run manifest.
//! - [`bench`]: popcount versus float convolution timings.
//! - [`cli`]: the `cbcn` subcommands.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod manifest;
pub mod metrics;

pub use error::{Error, Result};
