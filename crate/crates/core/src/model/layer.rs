use alloc::vec::Vec;

use super::branch::{Branch, BranchCache, Mechanism};
use super::config::ModelConfig;
use crate::hybrid::{AttentionKind, FfnKind, LayerSpec, MergeWeights};
use crate::math::{rms_norm_rows, ParamRng};
use crate::moe::{moe_forward, DenseFfn, MoeLayer};
use crate::proj::{Linear, Mode};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    Dense(DenseFfn),
    Moe(MoeLayer),
}

impl Ffn {
    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        match self {
            Ffn::Dense(f) => f.forward(x, mode),
            Ffn::Moe(m) => moe_forward(x, m, mode).map(|(y, _)| y),
        }
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        match self {
            Ffn::Dense(f) => f.linears_mut().into_iter().collect(),
            Ffn::Moe(m) => m.experts.iter_mut().chain(m.shared.iter_mut()).flat_map(|e| e.linears_mut()).collect(),
        }
    }
}

/// Pre-norm residual layer: `h = x + attn(rms(x))`, `y = h + ffn(rms(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    pub branches: Vec<Branch>,
    pub merge: MergeWeights,
    pub ffn: Ffn,
}

pub(crate) fn mechanisms(spec: &LayerSpec) -> Vec<Mechanism> {
    let window = || Mechanism::Window(spec.window.unwrap_or(1));
    let softmax = Mechanism::Softmax { sinks: spec.sink_count };
    match spec.attention {
        AttentionKind::Fa => alloc::vec![softmax],
        AttentionKind::Swa => alloc::vec![window()],
        AttentionKind::La => alloc::vec![Mechanism::Linear],
        AttentionKind::LaSwa => alloc::vec![Mechanism::Linear, window()],
        AttentionKind::LaFa => alloc::vec![Mechanism::Linear, softmax],
    }
}

impl Layer {
    pub fn random(rng: &mut ParamRng, cfg: &ModelConfig, spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let branches = mechanisms(&spec).into_iter().map(|m| Branch::random(rng, cfg, m)).collect();
        let ffn = match spec.ffn {
            FfnKind::Dense => Ffn::Dense(DenseFfn::random(rng, cfg.d_model, cfg.d_ff, cfg.activation)),
            FfnKind::Moe => {
                let m = cfg.moe.ok_or_else(|| Error::Config("MoE layer without moe settings".into()))?;
                let experts =
                    (0..m.experts).map(|_| DenseFfn::random(rng, cfg.d_model, cfg.d_ff, cfg.activation)).collect();
                let shared =
                    (0..m.shared).map(|_| DenseFfn::random(rng, cfg.d_model, cfg.d_ff, cfg.activation)).collect();
                Ffn::Moe(MoeLayer {
                    experts,
                    shared,
                    router_w: rng.matrix(m.experts, cfg.d_model),
                    top_k: m.top_k,
                    sigma: m.router,
                })
            }
        };
        Ok(Self {
            spec,
            attn_norm: Tensor::filled(&[cfg.d_model], 1.0),
            ffn_norm: Tensor::filled(&[cfg.d_model], 1.0),
            branches,
            merge: cfg.merge,
            ffn,
        })
    }

    pub fn new_cache(&self) -> LayerCache {
        LayerCache { branches: self.branches.iter().map(Branch::new_cache).collect() }
    }

    /// Attention mixing of an already normalized input: the single branch
    /// output, or `w1 · rms(b1) + w2 · rms(b2)` for two branches.
    pub fn mix(
        &self,
        xn: &Tensor,
        pos0: usize,
        cache: &mut LayerCache,
        mw: MergeWeights,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor> {
        if cache.branches.len() != self.branches.len() {
            return Err(Error::CacheMismatch);
        }
        match self.branches.as_slice() {
            [b] => b.forward(xn, pos0, &mut cache.branches[0], mode),
            [b1, b2] => {
                let (c1, c2) = cache.branches.split_at_mut(1);
                let o1 = rms_norm_rows(&b1.forward(xn, pos0, &mut c1[0], mode)?, None);
                let o2 = rms_norm_rows(&b2.forward(xn, pos0, &mut c2[0], mode)?, None);
                let data = o1.data().iter().zip(o2.data()).map(|(a, b)| mw.w1 * a + mw.w2 * b).collect();
                Tensor::from_parts(o1.shape().to_vec(), data)
            }
            _ => Err(Error::Config("layers hold one or two attention branches".into())),
        }
    }

    /// Full layer over `x [n, d_model]` at absolute positions from `pos0`.
    pub fn forward(&self, x: &Tensor, pos0: usize, cache: &mut LayerCache, mode: &mut Mode<'_>) -> Result<Tensor> {
        let xn = rms_norm_rows(x, Some(self.attn_norm.data()));
        let a = self.mix(&xn, pos0, cache, self.merge, mode)?;
        let mut h = x.clone();
        for (hv, av) in h.data_mut().iter_mut().zip(a.data()) {
            *hv += av;
        }
        let hn = rms_norm_rows(&h, Some(self.ffn_norm.data()));
        let f = self.ffn.forward(&hn, mode)?;
        for (hv, fv) in h.data_mut().iter_mut().zip(f.data()) {
            *hv += fv;
        }
        Ok(h)
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = self.branches.iter_mut().flat_map(|b| b.linears_mut()).collect();
        v.extend(self.ffn.linears_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub branches: Vec<BranchCache>,
}

impl LayerCache {
    pub fn nbytes(&self) -> usize {
        self.branches.iter().map(BranchCache::nbytes).sum()
    }
}
