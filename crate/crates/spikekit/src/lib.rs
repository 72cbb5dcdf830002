//! File formats, benchmarks and the command line for `spikekit-core`.
//!
//! - [`checkpoint`]: single-file model checkpoints with a JSON manifest.
//! - [`tensor_file`]: raw `f32` tensor files used as spike-analysis input.
//! - [`raster`]: time-neuron raster CSV export.
//! - [`bench`]: prefill timing and scaling fits.
//! - [`cli`]: the `spikekit` command.

pub mod bench;
pub mod checkpoint;
pub mod cli;
mod error;
pub mod raster;
pub mod tensor_file;

pub use error::{Error, Result, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
pub use spikekit_core as core;
