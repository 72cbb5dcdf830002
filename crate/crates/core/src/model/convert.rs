use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::branch::{Branch, Geometry, LowRankGate, Mechanism};
use super::config::{GateKind, LaNorm, ModelConfig, MoeSettings};
use super::layer::{mechanisms, Ffn, Layer};
use super::Model;
use crate::hybrid::{AttentionKind, FfnKind, LayerSpec, MergeWeights};
use crate::math::ParamRng;
use crate::moe::{scaling_factor, upcycle};
use crate::{Error, Result};

/// Target layout and new-parameter settings for a conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionPlan {
    pub layout: Vec<LayerSpec>,
    #[serde(default)]
    pub gate: GateKind,
    #[serde(default)]
    pub la_norm: LaNorm,
    #[serde(default)]
    pub moe: Option<MoeSettings>,
    #[serde(default)]
    pub merge: MergeWeights,
    /// Seed for gates, sinks and routers introduced by the conversion.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConversion {
    pub index: usize,
    pub from: AttentionKind,
    pub to: AttentionKind,
    pub ffn: FfnKind,
    /// Parameters that did not exist in the source layer.
    pub new_params: usize,
    /// Expert weight multiplier for upcycled layers.
    pub scaling_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionSummary {
    pub layers: Vec<LayerConversion>,
}

/// Converts a softmax-attention model with dense FFNs into the plan's
/// layout.
///
/// Query, key, value, output and FFN weights are copied unchanged into every
/// branch. Linear branches read sigmoid features of the same projections and
/// receive a fresh low-rank gate; window branches only add a window; MoE
/// layers are upcycled from the source FFN.
pub fn convert_from_softmax(src: &Model, plan: &ConversionPlan) -> Result<(Model, ConversionSummary)> {
    if plan.layout.len() != src.layers.len() {
        return Err(Error::Config(format!("plan has {} layers, source has {}", plan.layout.len(), src.layers.len())));
    }
    let mut cfg: ModelConfig = src.config.clone();
    cfg.layout = plan.layout.clone();
    cfg.gate = plan.gate;
    cfg.la_norm = plan.la_norm;
    cfg.merge = plan.merge;
    cfg.moe = plan.moe.or(cfg.moe);
    cfg.spike = None;
    cfg.validate()?;
    let geom = Geometry::of(&cfg);
    let mut rng = ParamRng::new(plan.seed);
    let mut layers = Vec::with_capacity(src.layers.len());
    let mut summary = Vec::with_capacity(src.layers.len());

    for (i, (sl, &spec)) in src.layers.iter().zip(&plan.layout).enumerate() {
        let (sb, dense) = match (sl.branches.as_slice(), &sl.ffn) {
            ([b], Ffn::Dense(f)) if matches!(b.mechanism, Mechanism::Softmax { .. }) => (b, f),
            _ => {
                return Err(Error::Config(format!(
                    "source layer {i} is {} with a non-dense or non-softmax structure",
                    sl.spec.attention
                )))
            }
        };
        let mut new_params = 0;
        let branches = mechanisms(&spec)
            .into_iter()
            .map(|mech| {
                let mut b = Branch {
                    mechanism: mech,
                    geom,
                    wq: sb.wq.clone(),
                    wk: sb.wk.clone(),
                    wv: sb.wv.clone(),
                    wo: sb.wo.clone(),
                    sink_k: None,
                    sink_v: None,
                    gate: None,
                };
                b.wq.quant = None;
                b.wk.quant = None;
                b.wv.quant = None;
                b.wo.quant = None;
                match mech {
                    Mechanism::Linear if cfg.gate == GateKind::LowRank => {
                        let g = LowRankGate::random(&mut rng, &cfg);
                        new_params += g.down.w.len() + g.up.w.len() + g.bias.len();
                        b.gate = Some(g);
                    }
                    Mechanism::Softmax { sinks } if sinks > 0 => {
                        if sb.sink_count() == sinks {
                            b.sink_k = sb.sink_k.clone();
                            b.sink_v = sb.sink_v.clone();
                        } else {
                            let fresh = Branch::random(&mut rng, &cfg, mech);
                            new_params += 2 * cfg.heads * sinks * cfg.d_head;
                            b.sink_k = fresh.sink_k;
                            b.sink_v = fresh.sink_v;
                        }
                    }
                    _ => {}
                }
                b
            })
            .collect();
        let mut dense = dense.clone();
        for l in dense.linears_mut() {
            l.quant = None;
        }
        let (ffn, factor) = match spec.ffn {
            FfnKind::Dense => (Ffn::Dense(dense), None),
            FfnKind::Moe => {
                let m = cfg.moe.ok_or_else(|| Error::Config("plan uses MoE without moe settings".into()))?;
                let mut layer = upcycle(&dense, m.experts, m.top_k, m.shared, rng.next_seed())?;
                layer.sigma = m.router;
                new_params += layer.router_w.len();
                (Ffn::Moe(layer), Some(scaling_factor(m.experts, m.top_k, m.shared)?))
            }
        };
        layers.push(Layer {
            spec,
            attn_norm: sl.attn_norm.clone(),
            ffn_norm: sl.ffn_norm.clone(),
            branches,
            merge: cfg.merge,
            ffn,
        });
        summary.push(LayerConversion {
            index: i,
            from: sl.spec.attention,
            to: spec.attention,
            ffn: spec.ffn,
            new_params,
            scaling_factor: factor,
        });
    }

    let mut lm_head = src.lm_head.clone();
    lm_head.quant = None;
    let model = Model { config: cfg, embed: src.embed.clone(), layers, final_norm: src.final_norm.clone(), lm_head };
    Ok((model, ConversionSummary { layers: summary }))
}
