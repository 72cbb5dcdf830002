//! Linear projections that can run either in float or through the
//! spike-count + INT8 path.

use serde::{Deserialize, Serialize};

use crate::analyzer::FiringAccumulator;
use crate::quant::{quantize_weights, w8_spike_project, QuantizedMatrix};
use crate::spike::{encode, spike_project, Granularity, Scheme};
use crate::{math, Result, Tensor};

/// Activation spiking applied to the input of every linear projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSettings {
    pub k: f32,
    pub scheme: Scheme,
    #[serde(default)]
    pub granularity: Granularity,
    /// Step count for bitwise schemes; `None` uses the minimal width.
    #[serde(default)]
    pub bits: Option<u32>,
}

impl Default for SpikeSettings {
    fn default() -> Self {
        Self { k: 1.0, scheme: Scheme::BitwiseBidir, granularity: Granularity::PerToken, bits: None }
    }
}

/// How projections are evaluated during a forward pass.
#[derive(Debug, Default)]
pub struct Mode<'a> {
    pub spike: Option<SpikeSettings>,
    pub recorder: Option<&'a mut FiringAccumulator>,
}

impl Mode<'_> {
    pub fn float() -> Self {
        Self { spike: None, recorder: None }
    }
}

/// `y = x Wᵀ` with `W [out, in]`, optionally holding an INT8 copy of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub quant: Option<QuantizedMatrix>,
}

impl Linear {
    pub fn new(w: Tensor) -> Self {
        Self { w, quant: None }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn quantize(&mut self) -> Result<()> {
        self.quant = Some(quantize_weights(&self.w)?);
        Ok(())
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self { w: self.w.scale(factor), quant: None }
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let Some(spike) = mode.spike else {
            return math::linear(x, &self.w);
        };
        let counts = encode(x, spike.k, spike.granularity)?;
        if let Some(rec) = mode.recorder.as_deref_mut() {
            rec.record(&counts, spike.scheme, spike.bits)?;
        }
        match &self.quant {
            Some(q) => w8_spike_project(q, &counts),
            None => spike_project(&self.w, &counts),
        }
    }
}
