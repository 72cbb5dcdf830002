use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hybrid::{build_layout, AttentionKind, FfnKind, LayerSpec, LayoutKind, LayoutOptions, MergeWeights};
use crate::moe::{Activation, RouterFn};
use crate::proj::SpikeSettings;
use crate::{Error, Result};

/// Forget gate used by linear-attention branches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Plain linear attention.
    None,
    /// `g = sigmoid(up(down(x)) + b)` with rank `max(1, d_head / 8)`.
    #[default]
    LowRank,
    /// `g = 1 - k`.
    KeyTied,
}

/// Output normalization of linear-attention branches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaNorm {
    /// Per-head RMS normalization of `q S`.
    #[default]
    Rms,
    /// Division by `q · Σ k`.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSettings {
    pub experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub shared: usize,
    #[serde(default)]
    pub router: RouterFn,
}

impl Default for MoeSettings {
    fn default() -> Self {
        Self { experts: 4, top_k: 1, shared: 1, router: RouterFn::Softmax }
    }
}

fn default_window() -> usize {
    32
}

fn default_chunk() -> usize {
    64
}

fn default_rope_base() -> f32 {
    10000.0
}

fn default_activation() -> Activation {
    Activation::Silu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub layout: Vec<LayerSpec>,
    #[serde(default)]
    pub moe: Option<MoeSettings>,
    /// Window used when layouts are generated.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub sink_count: usize,
    #[serde(default)]
    pub gate: GateKind,
    #[serde(default)]
    pub la_norm: LaNorm,
    /// Chunk length of the chunkwise linear-attention prefill.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default)]
    pub merge: MergeWeights,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub spike: Option<SpikeSettings>,
}

impl ModelConfig {
    /// Toy-scale configuration for a reference layout family.
    pub fn toy(kind: LayoutKind, depth: usize) -> Result<Self> {
        let window = default_window();
        let layout = build_layout(kind, depth, &LayoutOptions { window, sink_count: 0 })?;
        let moe = layout.iter().any(|s| s.ffn == FfnKind::Moe).then(MoeSettings::default);
        Ok(Self::with_layout(layout, moe))
    }

    /// Toy-scale configuration with the same attention kind in every layer.
    pub fn uniform(kind: AttentionKind, depth: usize) -> Self {
        let window = default_window();
        let spec = LayerSpec::new(kind, FfnKind::Dense);
        let spec = if kind.uses_window() { spec.with_window(window) } else { spec };
        Self::with_layout(alloc::vec![spec; depth], None)
    }

    fn with_layout(layout: Vec<LayerSpec>, moe: Option<MoeSettings>) -> Self {
        Self {
            depth: layout.len(),
            d_model: 128,
            heads: 4,
            d_head: 32,
            d_ff: 256,
            vocab: 1024,
            layout,
            moe,
            window: default_window(),
            sink_count: 0,
            gate: GateKind::default(),
            la_norm: LaNorm::default(),
            chunk: default_chunk(),
            rope_base: default_rope_base(),
            merge: MergeWeights::default(),
            activation: default_activation(),
            spike: None,
        }
    }

    /// Shrinks the widths, keeping the layout.
    pub fn with_dims(mut self, d_model: usize, heads: usize, d_ff: usize, vocab: usize) -> Self {
        self.d_model = d_model;
        self.heads = heads;
        self.d_head = d_model.checked_div(heads).unwrap_or(0);
        self.d_ff = d_ff;
        self.vocab = vocab;
        self
    }

    pub fn gate_rank(&self) -> usize {
        (self.d_head / 8).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_head == 0 || self.d_ff == 0 || self.vocab == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model != self.heads * self.d_head {
            return bad(format!("d_model {} != heads {} × d_head {}", self.d_model, self.heads, self.d_head));
        }
        if self.d_head % 2 != 0 {
            return bad(format!("d_head {} must be even for rotary embeddings", self.d_head));
        }
        if self.layout.len() != self.depth {
            return bad(format!("layout has {} layers, depth is {}", self.layout.len(), self.depth));
        }
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        for (i, spec) in self.layout.iter().enumerate() {
            spec.validate().map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        }
        if self.layout.iter().any(|s| s.ffn == FfnKind::Moe) {
            let Some(m) = self.moe else {
                return bad("layout uses MoE layers but no moe settings are given".into());
            };
            if m.top_k == 0 || m.top_k > m.experts {
                return Err(Error::TopK { top_k: m.top_k, experts: m.experts });
            }
        }
        if self.chunk == 0 {
            return Err(Error::InvalidChunk);
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1".into());
        }
        self.merge.validate()?;
        if let Some(s) = self.spike {
            if !(s.k > 0.0 && s.k.is_finite()) {
                return bad(format!("spike k must be positive, got {}", s.k));
            }
        }
        Ok(())
    }
}
