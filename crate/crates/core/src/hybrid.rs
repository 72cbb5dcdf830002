//! Layer specifications, reference layouts and hybrid block composition.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::Layer;
use crate::proj::Mode;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Full causal softmax attention.
    Fa,
    /// Sliding-window softmax attention.
    Swa,
    /// (Gated) linear attention.
    La,
    /// Parallel linear + sliding-window branches.
    LaSwa,
    /// Parallel linear + full softmax branches.
    LaFa,
}

impl AttentionKind {
    pub fn uses_window(self) -> bool {
        matches!(self, AttentionKind::Swa | AttentionKind::LaSwa)
    }

    pub fn uses_full_softmax(self) -> bool {
        matches!(self, AttentionKind::Fa | AttentionKind::LaFa)
    }

    pub fn is_parallel(self) -> bool {
        matches!(self, AttentionKind::LaSwa | AttentionKind::LaFa)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Fa => "FA",
            AttentionKind::Swa => "SWA",
            AttentionKind::La => "LA",
            AttentionKind::LaSwa => "LA+SWA",
            AttentionKind::LaFa => "LA+FA",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Moe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub attention: AttentionKind,
    #[serde(default)]
    pub window: Option<usize>,
    pub ffn: FfnKind,
    #[serde(default)]
    pub sink_count: usize,
}

impl LayerSpec {
    pub fn new(attention: AttentionKind, ffn: FfnKind) -> Self {
        Self { attention, window: None, ffn, sink_count: 0 }
    }

    pub fn with_window(mut self, w: usize) -> Self {
        self.window = Some(w);
        self
    }

    pub fn with_sinks(mut self, sinks: usize) -> Self {
        self.sink_count = sinks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.attention.uses_window(), self.window) {
            (true, None) => return Err(Error::Config(format!("{} layer needs a window", self.attention))),
            (true, Some(0)) => return Err(Error::InvalidWindow),
            (false, Some(_)) => return Err(Error::Config(format!("{} layer cannot take a window", self.attention))),
            _ => {}
        }
        if self.sink_count > 0 && !self.attention.uses_full_softmax() {
            return Err(Error::Config(format!("{} layer cannot take sink tokens", self.attention)));
        }
        Ok(())
    }
}

/// Scalar weights of the parallel-branch merge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights {
    pub w1: f32,
    pub w2: f32,
}

impl Default for MergeWeights {
    fn default() -> Self {
        Self { w1: 0.5, w2: 0.5 }
    }
}

impl MergeWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w1.is_finite() && self.w2.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("merge weights must be finite".into()))
        }
    }
}

/// Reference layout families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Alternating LA / SWA layers, dense FFN everywhere.
    InterLayer,
    /// Parallel LA+SWA layers with LA+FA at every seventh layer, mostly MoE.
    IntraLayer,
}

impl FromStr for LayoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_layer" | "7b" => Ok(Self::InterLayer),
            "intra_layer" | "76b" => Ok(Self::IntraLayer),
            other => Err(Error::invalid(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutOptions {
    pub window: usize,
    pub sink_count: usize,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        Self { window: 32, sink_count: 0 }
    }
}

/// Dense-FFN layers (1-based) of the 28-layer intra-layer reference stack.
const DENSE_REFERENCE: [usize; 7] = [1, 2, 3, 5, 7, 9, 11];
const REFERENCE_DEPTH: usize = 28;
const FA_PERIOD: usize = 7;

/// 1-based layers holding an LA+FA layer in an intra-layer stack of `depth`.
pub fn fa_layers(depth: usize) -> Vec<usize> {
    let count = depth.div_ceil(FA_PERIOD);
    (1..=count).map(|i| (i * depth).div_ceil(count)).collect()
}

/// 1-based dense-FFN layers in an intra-layer stack of `depth`.
pub fn dense_layers(depth: usize) -> Vec<usize> {
    let mut out: Vec<usize> = DENSE_REFERENCE.iter().map(|&l| (l * depth).div_ceil(REFERENCE_DEPTH).max(1)).collect();
    out.dedup();
    out
}

pub fn build_layout(kind: LayoutKind, depth: usize, opts: &LayoutOptions) -> Result<Vec<LayerSpec>> {
    if depth < 2 {
        return Err(Error::Config(format!("layout depth must be at least 2, got {depth}")));
    }
    if opts.window == 0 {
        return Err(Error::InvalidWindow);
    }
    let specs = match kind {
        LayoutKind::InterLayer => (0..depth)
            .map(|i| {
                if i % 2 == 0 {
                    LayerSpec::new(AttentionKind::La, FfnKind::Dense)
                } else {
                    LayerSpec::new(AttentionKind::Swa, FfnKind::Dense).with_window(opts.window)
                }
            })
            .collect(),
        LayoutKind::IntraLayer => {
            let fa = fa_layers(depth);
            let dense = dense_layers(depth);
            (1..=depth)
                .map(|l| {
                    let ffn = if dense.contains(&l) { FfnKind::Dense } else { FfnKind::Moe };
                    if fa.contains(&l) {
                        LayerSpec::new(AttentionKind::LaFa, ffn).with_sinks(opts.sink_count)
                    } else {
                        LayerSpec::new(AttentionKind::LaSwa, ffn).with_window(opts.window)
                    }
                })
                .collect()
        }
    };
    Ok(specs)
}

/// Two layers applied one after the other, each with pre-norm residual
/// attention and FFN sublayers. `x` is `[n, d_model]` and starts at
/// position 0.
pub fn sequential_block(x: &Tensor, first: &Layer, second: &Layer, mode: &mut Mode<'_>) -> Result<Tensor> {
    let mut c1 = first.new_cache();
    let mut c2 = second.new_cache();
    let h = first.forward(x, 0, &mut c1, mode)?;
    second.forward(&h, 0, &mut c2, mode)
}

/// `w1 · rms(branch1(x)) + w2 · rms(branch2(x))` for a parallel layer,
/// without the residual path. `x` is `[n, d_model]`.
pub fn parallel_block(x: &Tensor, layer: &Layer, mw: MergeWeights, mode: &mut Mode<'_>) -> Result<Tensor> {
    if layer.branches.len() != 2 {
        return Err(Error::Config(format!("{} is not a parallel layer", layer.spec.attention)));
    }
    let mut cache = layer.new_cache();
    layer.mix(x, 0, &mut cache, mw, mode)
}

#[cfg(test)]
mod tests {
    extern crate std;

    use alloc::vec;

    use super::*;

    #[test]
    fn inter_layer_alternates() {
        let l = build_layout(LayoutKind::InterLayer, 4, &LayoutOptions::default()).unwrap();
        let kinds: std::vec::Vec<_> = l.iter().map(|s| s.attention).collect();
        assert_eq!(kinds, vec![AttentionKind::La, AttentionKind::Swa, AttentionKind::La, AttentionKind::Swa]);
        assert!(l.iter().all(|s| s.ffn == FfnKind::Dense));
        assert_eq!(l[1].window, Some(32));
        assert_eq!(l[0].window, None);
    }

    #[test]
    fn intra_layer_reference_depth() {
        let l = build_layout(LayoutKind::IntraLayer, 28, &LayoutOptions::default()).unwrap();
        let fa: std::vec::Vec<usize> = (1..=28).filter(|&i| l[i - 1].attention == AttentionKind::LaFa).collect();
        assert_eq!(fa, vec![7, 14, 21, 28]);
        let dense: std::vec::Vec<usize> = (1..=28).filter(|&i| l[i - 1].ffn == FfnKind::Dense).collect();
        assert_eq!(dense, vec![1, 2, 3, 5, 7, 9, 11]);
        assert_eq!(l.iter().filter(|s| s.ffn == FfnKind::Moe).count(), 21);
        assert!(l.iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn intra_layer_small_depths() {
        assert_eq!(fa_layers(8), vec![4, 8]);
        assert_eq!(fa_layers(4), vec![4]);
        assert_eq!(fa_layers(14), vec![7, 14]);
        for depth in 2..=40 {
            assert_eq!(fa_layers(depth).len(), depth.div_ceil(7));
            let d = dense_layers(depth);
            assert!(d.windows(2).all(|w| w[0] < w[1]));
            assert!(d.iter().all(|&l| (1..=depth).contains(&l)));
        }
    }

    #[test]
    fn depth_below_two_rejected() {
        assert!(build_layout(LayoutKind::InterLayer, 1, &LayoutOptions::default()).is_err());
    }

    #[test]
    fn layout_is_deterministic() {
        let o = LayoutOptions { window: 8, sink_count: 2 };
        assert_eq!(
            build_layout(LayoutKind::IntraLayer, 9, &o).unwrap(),
            build_layout(LayoutKind::IntraLayer, 9, &o).unwrap()
        );
    }

    #[test]
    fn spec_validation() {
        assert!(LayerSpec::new(AttentionKind::Swa, FfnKind::Dense).validate().is_err());
        assert!(LayerSpec::new(AttentionKind::La, FfnKind::Dense).with_window(4).validate().is_err());
        assert!(LayerSpec::new(AttentionKind::La, FfnKind::Dense).with_sinks(2).validate().is_err());
        assert!(LayerSpec::new(AttentionKind::LaFa, FfnKind::Dense).with_sinks(2).validate().is_ok());
        assert_eq!(
            LayerSpec::new(AttentionKind::Swa, FfnKind::Dense).with_window(0).validate(),
            Err(Error::InvalidWindow)
        );
    }
}
