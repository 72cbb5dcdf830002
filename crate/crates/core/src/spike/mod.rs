//! Adaptive-threshold spike encoding.
//!
//! Activations become integer spike counts in a single step
//! (`round(x / V_th)` with `V_th = mean|x| / k`), counts expand into spike
//! trains under one of five coding schemes, and trains collapse back to the
//! exact counts. [`if_simulate`] is the multi-step integrate-and-fire
//! reference that the single-step count reproduces.

mod coding;
mod neuron;
mod project;
mod threshold;

pub use coding::{collapse, expand, min_bits, naf_digits, Scheme, SpikeTrain};
pub use neuron::{if_simulate, lif_simulate, NeuronParams, Reset};
pub use project::{spike_project, spike_project_events};
pub use threshold::{
    adaptive_threshold, encode, encode_counts, round_half_away, Granularity, SpikeCountTensor, ZERO_THRESHOLD,
};
