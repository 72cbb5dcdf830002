//! Attention mechanisms and their equivalent computational forms.
//!
//! Tensors follow the `[heads, seq, dim]` layout. Softmax kernels implement
//! the unscaled `exp(q·k)` weighting; callers that want the usual
//! `1/sqrt(d)` temperature scale the queries first.

mod linear;
mod map;
mod softmax;

pub use linear::{
    gla_chunkwise, gla_chunkwise_with_state, gla_recurrent, key_tied_gate, linear_attention_parallel,
    linear_attention_recurrent,
};
pub use map::{attention_map, AttentionMap, MapKind};
pub use softmax::{attend, softmax_attention, swa};

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Query, key and value tensors for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let (hq, nq, dq) = q.dims3()?;
        let (hk, nk, dk) = k.dims3()?;
        let (hv, nv, _) = v.dims3()?;
        if hq != hk || hq != hv {
            return Err(Error::shape(format!("head counts differ: q {hq}, k {hk}, v {hv}")));
        }
        if nq != nk || nq != nv {
            return Err(Error::shape(format!("sequence lengths differ: q {nq}, k {nk}, v {nv}")));
        }
        if dq != dk {
            return Err(Error::shape(format!("query width {dq} != key width {dk}")));
        }
        if nq == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self { q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn seq(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn d_k(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn d_v(&self) -> usize {
        self.v.shape()[2]
    }

    /// `[seq, dim]` block of `t` for head `h`.
    pub(crate) fn head(t: &Tensor, h: usize) -> &[f32] {
        let s = t.shape();
        let block = s[1] * s[2];
        &t.data()[h * block..(h + 1) * block]
    }
}

/// Per-head `d_k × d_v` state that replaces the key/value cache.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    /// `[heads, d_k, d_v]`
    pub s: Tensor,
    /// `[heads, d_k]`, the running key sum used by sum normalization.
    pub normalizer: Option<Tensor>,
}

impl RecurrentState {
    pub fn zeros(heads: usize, d_k: usize, d_v: usize) -> Self {
        Self { s: Tensor::zeros(&[heads, d_k, d_v]), normalizer: None }
    }

    pub fn with_normalizer(heads: usize, d_k: usize, d_v: usize) -> Self {
        Self { s: Tensor::zeros(&[heads, d_k, d_v]), normalizer: Some(Tensor::zeros(&[heads, d_k])) }
    }

    pub fn heads(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn d_v(&self) -> usize {
        self.s.shape()[2]
    }

    /// Bytes held by the state; independent of how many tokens were consumed.
    pub fn nbytes(&self) -> usize {
        self.s.nbytes() + self.normalizer.as_ref().map_or(0, Tensor::nbytes)
    }

    /// One recurrence step for all heads:
    /// `S ← diag(g) S + kᵀ v`, `o = q S`. Without a gate, `g = 1`.
    ///
    /// `q`, `k`, `gate` are `[heads, d_k]`; `v` is `[heads, d_v]`.
    pub(crate) fn step(&mut self, q: &[f32], k: &[f32], v: &[f32], gate: Option<&[f32]>) -> Result<Tensor> {
        let (heads, d_k, d_v) = (self.heads(), self.d_k(), self.d_v());
        if q.len() != heads * d_k || k.len() != heads * d_k || v.len() != heads * d_v {
            return Err(Error::shape(format!("step expects q,k [{heads}, {d_k}] and v [{heads}, {d_v}]")));
        }
        if let Some(g) = gate {
            if g.len() != heads * d_k {
                return Err(Error::shape(format!("gate expects [{heads}, {d_k}]")));
            }
            if let Some(&bad) = g.iter().find(|g| !(0.0..=1.0).contains(*g)) {
                return Err(Error::GateDomain(bad));
            }
        }
        let mut out = Tensor::zeros(&[heads, d_v]);
        let s = self.s.data_mut();
        for h in 0..heads {
            let sh = &mut s[h * d_k * d_v..(h + 1) * d_k * d_v];
            let kh = &k[h * d_k..(h + 1) * d_k];
            let vh = &v[h * d_v..(h + 1) * d_v];
            for i in 0..d_k {
                let row = &mut sh[i * d_v..(i + 1) * d_v];
                if let Some(g) = gate {
                    let gi = g[h * d_k + i];
                    for x in row.iter_mut() {
                        *x *= gi;
                    }
                }
                crate::math::axpy(kh[i], vh, row);
            }
            let qh = &q[h * d_k..(h + 1) * d_k];
            let oh = &mut out.data_mut()[h * d_v..(h + 1) * d_v];
            for i in 0..d_k {
                crate::math::axpy(qh[i], &sh[i * d_v..(i + 1) * d_v], oh);
            }
        }
        if let Some(z) = self.normalizer.as_mut() {
            for (idx, zi) in z.data_mut().iter_mut().enumerate() {
                if let Some(g) = gate {
                    *zi *= g[idx];
                }
                *zi += k[idx];
            }
        }
        Ok(out)
    }

    /// Per-head `q · z`, the sum-normalization denominator.
    pub fn denominators(&self, q: &[f32]) -> Option<Vec<f32>> {
        let z = self.normalizer.as_ref()?;
        let d_k = self.d_k();
        Some((0..self.heads()).map(|h| crate::math::dot(&q[h * d_k..(h + 1) * d_k], z.row(h))).collect())
    }
}

/// Elementwise forget gates, `[heads, seq, d_k]`, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    g: Tensor,
}

impl GateVector {
    pub fn new(g: Tensor) -> Result<Self> {
        g.dims3()?;
        if let Some(&bad) = g.data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::GateDomain(bad));
        }
        Ok(Self { g })
    }

    /// Accepts the closed interval, for the `g = 0` / `g = 1` limits.
    pub fn new_closed(g: Tensor) -> Result<Self> {
        g.dims3()?;
        if let Some(&bad) = g.data().iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::GateDomain(bad));
        }
        Ok(Self { g })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.g
    }

    pub fn into_tensor(self) -> Tensor {
        self.g
    }
}
