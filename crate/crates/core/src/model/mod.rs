//! Toy model assembly, softmax-to-hybrid conversion, prefill and decode.

mod branch;
mod config;
mod convert;
mod layer;
mod metrics;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use branch::{
    from_heads, rope, to_heads, Branch, BranchCache, Geometry, KvCache, LowRankGate, Mechanism, GATE_BIAS,
};
pub use config::{GateKind, LaNorm, ModelConfig, MoeSettings};
pub use convert::{convert_from_softmax, ConversionPlan, ConversionSummary, LayerConversion};
pub use layer::{Ffn, Layer, LayerCache};
pub use metrics::{
    linear_fit, loglog_slope, tgs_mfu_report, LinearFit, ThroughputReport, REFERENCE_MFU, REFERENCE_TGS,
};

use crate::analyzer::FiringAccumulator;
use crate::attention::{attention_map, AttentionInputs, AttentionMap, GateVector, MapKind};
use crate::math::{rms_norm_rows, ParamRng};
use crate::proj::{Linear, Mode, SpikeSettings};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub embed: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
    /// `[vocab, d_model]`
    pub lm_head: Linear,
}

/// Per-layer caches plus the number of positions consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    pub layers: Vec<LayerCache>,
    pub pos: usize,
}

impl Cache {
    pub fn nbytes(&self) -> usize {
        self.layers.iter().map(LayerCache::nbytes).sum()
    }
}

/// Borrowed view of a named parameter.
#[derive(Debug)]
pub enum Param<'a> {
    Tensor(&'a Tensor),
    Linear(&'a Linear),
}

#[derive(Debug)]
pub enum ParamMut<'a> {
    Tensor(&'a mut Tensor),
    Linear(&'a mut Linear),
}

macro_rules! walk_params {
    ($model:expr, $out:ident, $T:path, $L:path, $it:ident, $($m:tt)?) => {{
        let m = $model;
        $out.push((String::from("embed"), $T(&$($m)? m.embed)));
        for (i, layer) in m.layers.$it().enumerate() {
            $out.push((format!("layers.{i}.attn_norm"), $T(&$($m)? layer.attn_norm)));
            for (b, br) in layer.branches.$it().enumerate() {
                let p = format!("layers.{i}.branches.{b}");
                $out.push((format!("{p}.wq"), $L(&$($m)? br.wq)));
                $out.push((format!("{p}.wk"), $L(&$($m)? br.wk)));
                $out.push((format!("{p}.wv"), $L(&$($m)? br.wv)));
                $out.push((format!("{p}.wo"), $L(&$($m)? br.wo)));
                if let Some(t) = &$($m)? br.sink_k {
                    $out.push((format!("{p}.sink_k"), $T(t)));
                }
                if let Some(t) = &$($m)? br.sink_v {
                    $out.push((format!("{p}.sink_v"), $T(t)));
                }
                if let Some(g) = &$($m)? br.gate {
                    $out.push((format!("{p}.gate.down"), $L(&$($m)? g.down)));
                    $out.push((format!("{p}.gate.up"), $L(&$($m)? g.up)));
                    $out.push((format!("{p}.gate.bias"), $T(&$($m)? g.bias)));
                }
            }
            $out.push((format!("layers.{i}.ffn_norm"), $T(&$($m)? layer.ffn_norm)));
            match &$($m)? layer.ffn {
                Ffn::Dense(f) => {
                    $out.push((format!("layers.{i}.ffn.gate"), $L(&$($m)? f.w_gate)));
                    $out.push((format!("layers.{i}.ffn.up"), $L(&$($m)? f.w_up)));
                    $out.push((format!("layers.{i}.ffn.down"), $L(&$($m)? f.w_down)));
                }
                Ffn::Moe(moe) => {
                    $out.push((format!("layers.{i}.ffn.router"), $T(&$($m)? moe.router_w)));
                    for (e, f) in moe.experts.$it().enumerate() {
                        $out.push((format!("layers.{i}.ffn.experts.{e}.gate"), $L(&$($m)? f.w_gate)));
                        $out.push((format!("layers.{i}.ffn.experts.{e}.up"), $L(&$($m)? f.w_up)));
                        $out.push((format!("layers.{i}.ffn.experts.{e}.down"), $L(&$($m)? f.w_down)));
                    }
                    for (s, f) in moe.shared.$it().enumerate() {
                        $out.push((format!("layers.{i}.ffn.shared.{s}.gate"), $L(&$($m)? f.w_gate)));
                        $out.push((format!("layers.{i}.ffn.shared.{s}.up"), $L(&$($m)? f.w_up)));
                        $out.push((format!("layers.{i}.ffn.shared.{s}.down"), $L(&$($m)? f.w_down)));
                    }
                }
            }
        }
        $out.push((String::from("final_norm"), $T(&$($m)? m.final_norm)));
        $out.push((String::from("lm_head"), $L(&$($m)? m.lm_head)));
    }};
}

/// Deterministic random initialization from `seed`.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ParamRng::new(seed);
    let embed = rng.tensor(&[config.vocab, config.d_model], 1.0);
    let layers =
        config.layout.iter().map(|&spec| Layer::random(&mut rng, &config, spec)).collect::<Result<Vec<_>>>()?;
    let lm_head = Linear::new(rng.matrix(config.vocab, config.d_model));
    let mut model = Model { final_norm: Tensor::filled(&[config.d_model], 1.0), embed, layers, lm_head, config };
    model.set_spike(model.config.spike)?;
    Ok(model)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &Tensor) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best as u32
}

impl Model {
    pub fn params(&self) -> Vec<(String, Param<'_>)> {
        let mut out = Vec::new();
        walk_params!(self, out, Param::Tensor, Param::Linear, iter,);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamMut<'_>)> {
        let mut out = Vec::new();
        walk_params!(self, out, ParamMut::Tensor, ParamMut::Linear, iter_mut, mut);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .map(|(_, p)| match p {
                Param::Tensor(t) => t.len(),
                Param::Linear(l) => l.w.len(),
            })
            .sum()
    }

    /// Turns spike mode on (quantizing every linear projection to INT8) or
    /// off. The MoE router stays in float.
    pub fn set_spike(&mut self, spike: Option<SpikeSettings>) -> Result<()> {
        if let Some(s) = spike {
            if !(s.k > 0.0 && s.k.is_finite()) {
                return Err(Error::Config(format!("spike k must be positive, got {}", s.k)));
            }
        }
        self.config.spike = spike;
        for (_, p) in self.params_mut() {
            if let ParamMut::Linear(l) = p {
                if spike.is_some() {
                    l.quantize()?;
                } else {
                    l.quant = None;
                }
            }
        }
        Ok(())
    }

    /// Evaluation mode implied by the configuration.
    pub fn mode<'a>(&self, recorder: Option<&'a mut FiringAccumulator>) -> Mode<'a> {
        Mode { spike: self.config.spike, recorder }
    }

    pub fn new_cache(&self) -> Cache {
        Cache { layers: self.layers.iter().map(Layer::new_cache).collect(), pos: 0 }
    }

    fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab });
            }
            data.extend_from_slice(self.embed.row(t as usize));
        }
        Tensor::from_parts(alloc::vec![tokens.len(), d], data)
    }

    /// Final hidden states `[n, d_model]` for `tokens` continuing `cache`.
    pub fn hidden(&self, tokens: &[u32], cache: &mut Cache, mode: &mut Mode<'_>) -> Result<Tensor> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch);
        }
        let mut x = self.embed_tokens(tokens)?;
        for (layer, lc) in self.layers.iter().zip(cache.layers.iter_mut()) {
            x = layer.forward(&x, cache.pos, lc, mode)?;
        }
        cache.pos += tokens.len();
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(rms_norm_rows(&x, Some(self.final_norm.data())))
    }

    fn last_logits(&self, h: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let (n, d) = h.dims2()?;
        let last = Tensor::from_parts(alloc::vec![1, d], h.row(n - 1).to_vec())?;
        let logits = self.lm_head.forward(&last, mode)?;
        logits.reshape(&[self.config.vocab])
    }

    /// Logits for the last position and the populated caches.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(Tensor, Cache)> {
        self.prefill_with(tokens, &mut self.mode(None))
    }

    pub fn prefill_with(&self, tokens: &[u32], mode: &mut Mode<'_>) -> Result<(Tensor, Cache)> {
        let mut cache = self.new_cache();
        let h = self.hidden(tokens, &mut cache, mode)?;
        Ok((self.last_logits(&h, mode)?, cache))
    }

    /// One-token update of `cache`; returns that token's logits.
    pub fn decode_step(&self, token: u32, cache: &mut Cache) -> Result<Tensor> {
        self.decode_step_with(token, cache, &mut self.mode(None))
    }

    pub fn decode_step_with(&self, token: u32, cache: &mut Cache, mode: &mut Mode<'_>) -> Result<Tensor> {
        let h = self.hidden(&[token], cache, mode)?;
        self.last_logits(&h, mode)
    }

    /// Logits `[n, vocab]` for every position of a fresh prefill.
    pub fn logits_all(&self, tokens: &[u32], mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut cache = self.new_cache();
        let h = self.hidden(tokens, &mut cache, mode)?;
        self.lm_head.forward(&h, mode)
    }

    /// Greedy continuation of `prompt` by `steps` tokens.
    pub fn generate(&self, prompt: &[u32], steps: usize, mode: &mut Mode<'_>) -> Result<(Vec<u32>, Tensor)> {
        let (mut logits, mut cache) = self.prefill_with(prompt, mode)?;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = argmax(&logits);
            out.push(next);
            logits = self.decode_step_with(next, &mut cache, mode)?;
        }
        Ok((out, logits))
    }

    /// Kernel inputs of branch `branch` in layer `layer` for a fresh
    /// float-mode pass over `tokens`.
    pub fn branch_inputs(
        &self,
        tokens: &[u32],
        layer: usize,
        branch: usize,
    ) -> Result<(AttentionInputs, Option<GateVector>)> {
        let target = self.layers.get(layer).ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        let br = target.branches.get(branch).ok_or_else(|| Error::invalid(format!("no branch {branch}")))?;
        let mut mode = Mode::float();
        let mut x = self.embed_tokens(tokens)?;
        for l in &self.layers[..layer] {
            let mut c = l.new_cache();
            x = l.forward(&x, 0, &mut c, &mut mode)?;
        }
        let xn = rms_norm_rows(&x, Some(target.attn_norm.data()));
        br.features(&xn, 0, &mut mode)
    }

    /// Attention maps of every branch in `layer` (sink tokens and gates
    /// excluded).
    pub fn attention_maps(&self, tokens: &[u32], layer: usize) -> Result<Vec<AttentionMap>> {
        let l = self.layers.get(layer).ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        (0..l.branches.len())
            .map(|b| {
                let (inp, _) = self.branch_inputs(tokens, layer, b)?;
                match l.branches[b].mechanism {
                    Mechanism::Softmax { .. } => attention_map(&inp, MapKind::Softmax, None),
                    Mechanism::Window(w) => attention_map(&inp, MapKind::Windowed, Some(w)),
                    Mechanism::Linear => attention_map(&inp, MapKind::Linear, None),
                }
            })
            .collect()
    }
}
