use alloc::format;
use alloc::vec;

use super::{AttentionInputs, GateVector, RecurrentState};
use crate::math::{axpy, dot};
use crate::{Error, Result, Tensor};

/// `O = (Q Kᵀ ⊙ M) V` with a binary causal mask, evaluated directly in
/// `O(n²)`.
pub fn linear_attention_parallel(inp: &AttentionInputs) -> Result<Tensor> {
    let (heads, n, d_k, d_v) = (inp.heads(), inp.seq(), inp.d_k(), inp.d_v());
    let mut out = Tensor::zeros(&[heads, n, d_v]);
    for h in 0..heads {
        let q = AttentionInputs::head(&inp.q, h);
        let k = AttentionInputs::head(&inp.k, h);
        let v = AttentionInputs::head(&inp.v, h);
        let o = &mut out.data_mut()[h * n * d_v..(h + 1) * n * d_v];
        for t in 0..n {
            let qt = &q[t * d_k..(t + 1) * d_k];
            let ot = &mut o[t * d_v..(t + 1) * d_v];
            for s in 0..=t {
                axpy(dot(qt, &k[s * d_k..(s + 1) * d_k]), &v[s * d_v..(s + 1) * d_v], ot);
            }
        }
    }
    Ok(out)
}

/// One step of `S_t = S_{t-1} + k_tᵀ v_t`, `o_t = q_t S_t`.
///
/// `q_t`, `k_t` are `[heads, d_k]`, `v_t` is `[heads, d_v]`. Returns `o_t` as
/// `[heads, d_v]` and advances `state` in place.
pub fn linear_attention_recurrent(
    q_t: &Tensor,
    k_t: &Tensor,
    v_t: &Tensor,
    state: &mut RecurrentState,
) -> Result<Tensor> {
    state.step(q_t.data(), k_t.data(), v_t.data(), None)
}

/// One step of `S_t = diag(g_t) S_{t-1} + k_tᵀ v_t`, `o_t = q_t S_t`.
///
/// The gate is `[heads, d_k]`. The closed interval is accepted so that the
/// `g = 0` and `g = 1` limits can be evaluated; anything outside it is a
/// gate-domain error.
pub fn gla_recurrent(
    q_t: &Tensor,
    k_t: &Tensor,
    v_t: &Tensor,
    g_t: &Tensor,
    state: &mut RecurrentState,
) -> Result<Tensor> {
    state.step(q_t.data(), k_t.data(), v_t.data(), Some(g_t.data()))
}

/// Chunkwise gated linear attention from a zero state.
pub fn gla_chunkwise(inp: &AttentionInputs, g: &GateVector, chunk: usize) -> Result<Tensor> {
    let init = RecurrentState::zeros(inp.heads(), inp.d_k(), inp.d_v());
    gla_chunkwise_with_state(inp, Some(g), chunk, init).map(|(o, _)| o)
}

/// Chunkwise (gated) linear attention starting from `state`.
///
/// Inside a chunk the outputs are computed in parallel form with relative
/// decays `Π_{r=s+1..=t} g_r`; across chunks the state is carried
/// recurrently. Returns the outputs and the state after the last token.
/// Without a gate this is plain linear attention.
pub fn gla_chunkwise_with_state(
    inp: &AttentionInputs,
    g: Option<&GateVector>,
    chunk: usize,
    mut state: RecurrentState,
) -> Result<(Tensor, RecurrentState)> {
    if chunk == 0 {
        return Err(Error::InvalidChunk);
    }
    let (heads, n, d_k, d_v) = (inp.heads(), inp.seq(), inp.d_k(), inp.d_v());
    if state.s.shape() != [heads, d_k, d_v] {
        return Err(Error::shape(format!(
            "state {:?} does not match heads {heads}, d_k {d_k}, d_v {d_v}",
            state.s.shape()
        )));
    }
    if let Some(g) = g {
        if g.tensor().shape() != inp.q.shape() {
            return Err(Error::shape(format!(
                "gate {:?} does not match queries {:?}",
                g.tensor().shape(),
                inp.q.shape()
            )));
        }
    }

    let mut out = Tensor::zeros(&[heads, n, d_v]);
    let mut decay = vec![1.0f32; d_k];
    let mut cum = vec![1.0f32; d_k];
    let mut qb = vec![0.0f32; d_k];

    for h in 0..heads {
        let q = AttentionInputs::head(&inp.q, h);
        let k = AttentionInputs::head(&inp.k, h);
        let v = AttentionInputs::head(&inp.v, h);
        let gh = g.map(|g| AttentionInputs::head(g.tensor(), h));
        let gate = |t: usize, i: usize| gh.map_or(1.0, |g| g[t * d_k + i]);
        let s = &mut state.s.data_mut()[h * d_k * d_v..(h + 1) * d_k * d_v];
        let mut z = state.normalizer.as_mut().map(|z| &mut z.data_mut()[h * d_k..(h + 1) * d_k]);
        let o = &mut out.data_mut()[h * n * d_v..(h + 1) * n * d_v];

        let mut c0 = 0;
        while c0 < n {
            let c1 = (c0 + chunk).min(n);
            cum.fill(1.0);
            for t in c0..c1 {
                let qt = &q[t * d_k..(t + 1) * d_k];
                let ot = &mut o[t * d_v..(t + 1) * d_v];
                // contribution of the state carried into this chunk
                for i in 0..d_k {
                    cum[i] *= gate(t, i);
                    qb[i] = qt[i] * cum[i];
                }
                for i in 0..d_k {
                    axpy(qb[i], &s[i * d_v..(i + 1) * d_v], ot);
                }
                // intra-chunk causal part
                decay.fill(1.0);
                for src in (c0..=t).rev() {
                    let ks = &k[src * d_k..(src + 1) * d_k];
                    let mut score = 0.0f32;
                    for i in 0..d_k {
                        score += qt[i] * decay[i] * ks[i];
                    }
                    axpy(score, &v[src * d_v..(src + 1) * d_v], ot);
                    for i in 0..d_k {
                        decay[i] *= gate(src, i);
                    }
                }
            }
            // carry the state to the end of the chunk
            for i in 0..d_k {
                for x in &mut s[i * d_v..(i + 1) * d_v] {
                    *x *= cum[i];
                }
                if let Some(z) = z.as_deref_mut() {
                    z[i] *= cum[i];
                }
            }
            decay.fill(1.0);
            for src in (c0..c1).rev() {
                let ks = &k[src * d_k..(src + 1) * d_k];
                let vs = &v[src * d_v..(src + 1) * d_v];
                for i in 0..d_k {
                    let w = decay[i] * ks[i];
                    axpy(w, vs, &mut s[i * d_v..(i + 1) * d_v]);
                    if let Some(z) = z.as_deref_mut() {
                        z[i] += w;
                    }
                    decay[i] *= gate(src, i);
                }
            }
            c0 = c1;
        }
    }
    Ok((out, state))
}

/// Key-tied forget gate `g = 1 - k`; keys must lie strictly inside (0, 1).
pub fn key_tied_gate(k: &Tensor) -> Result<GateVector> {
    if let Some(&bad) = k.data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Domain(bad));
    }
    GateVector::new(k.map(|x| 1.0 - x))
}
