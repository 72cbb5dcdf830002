//! Desk-scale kernels for spiking hybrid-linear language models.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is a pure
//! function over in-memory tensors; file formats, timing and the command line
//! live in the companion `spikekit` crate.
//!
//! - [`attention`]: softmax, sliding-window, linear and gated linear attention
//!   in parallel, recurrent and chunkwise forms, plus explicit attention maps.
//! - [`hybrid`]: layer specs, layouts and inter/intra-layer hybrid blocks.
//! - [`moe`]: top-k routing, SwiGLU experts, dense-to-MoE upcycling.
//! - [`spike`]: adaptive thresholds, integer spike counts, spike-train coding
//!   schemes and integrate-and-fire reference neurons.
//! - [`quant`]: symmetric INT8 weights and the W8 + spike projection.
//! - [`analyzer`]: firing statistics, energy estimates and raster rows.
//! - [`model`]: toy model assembly, conversion, prefill and decode.

#![no_std]

extern crate alloc;

pub mod analyzer;
pub mod attention;
mod error;
pub mod hybrid;
pub mod math;
pub mod model;
pub mod moe;
pub mod proj;
pub mod quant;
pub mod spike;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
