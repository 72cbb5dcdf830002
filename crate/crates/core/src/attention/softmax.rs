use alloc::vec::Vec;

use super::AttentionInputs;
use crate::math::{axpy, dot, exp};
use crate::{Error, Result, Tensor};

/// Softmax-weighted sum of `values` for one query.
///
/// `keys` is `[m, d_k]` and `values` is `[m, d_v]`, both contiguous. Keys are
/// visited in index order; prefill and decode share this routine so both
/// paths reduce in the same order.
pub fn attend(q: &[f32], keys: &[f32], values: &[f32], scores: &mut Vec<f32>, out: &mut [f32]) {
    let d_k = q.len();
    let d_v = out.len();
    let m = keys.len() / d_k;
    debug_assert_eq!(values.len(), m * d_v);
    scores.clear();
    scores.extend(keys.chunks_exact(d_k).map(|k| dot(q, k)));
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = exp(*s - max);
        sum += *s;
    }
    out.fill(0.0);
    for (p, v) in scores.iter().zip(values.chunks_exact(d_v)) {
        axpy(p / sum, v, out);
    }
}

/// Causal softmax attention over `[heads, seq, d]` inputs.
///
/// The first `sink_count` positions are sink tokens: they attend to each
/// other without a causal mask, and every later token sees all of them.
pub fn softmax_attention(inp: &AttentionInputs, sink_count: usize) -> Result<Tensor> {
    let n = inp.seq();
    if sink_count > n {
        return Err(Error::invalid(alloc::format!("sink_count {sink_count} exceeds sequence length {n}")));
    }
    masked(inp, |t| if t < sink_count { 0..sink_count } else { 0..t + 1 })
}

/// Sliding-window attention: position `t` sees `max(0, t-w+1)..=t`.
pub fn swa(inp: &AttentionInputs, w: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(Error::InvalidWindow);
    }
    masked(inp, |t| (t + 1).saturating_sub(w)..t + 1)
}

fn masked(inp: &AttentionInputs, support: impl Fn(usize) -> core::ops::Range<usize>) -> Result<Tensor> {
    let (heads, n, d_k, d_v) = (inp.heads(), inp.seq(), inp.d_k(), inp.d_v());
    let mut out = Tensor::zeros(&[heads, n, d_v]);
    let mut scores = Vec::with_capacity(n);
    for h in 0..heads {
        let q = AttentionInputs::head(&inp.q, h);
        let k = AttentionInputs::head(&inp.k, h);
        let v = AttentionInputs::head(&inp.v, h);
        let o = &mut out.data_mut()[h * n * d_v..(h + 1) * n * d_v];
        for t in 0..n {
            let r = support(t);
            attend(
                &q[t * d_k..(t + 1) * d_k],
                &k[r.start * d_k..r.end * d_k],
                &v[r.start * d_v..r.end * d_v],
                &mut scores,
                &mut o[t * d_v..(t + 1) * d_v],
            );
        }
    }
    Ok(out)
}
