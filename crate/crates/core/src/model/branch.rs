//! One attention branch: projections, mechanism and its cache.

use alloc::vec;
use alloc::vec::Vec;

use super::config::{GateKind, LaNorm, ModelConfig};
use crate::attention::{
    attend, gla_chunkwise_with_state, softmax_attention, swa, AttentionInputs, GateVector, RecurrentState,
};
use crate::math::{rms_norm_in_place, sigmoid, ParamRng};
use crate::proj::{Linear, Mode};
use crate::{Error, Result, Tensor};

/// Keeps sigmoid features strictly inside (0, 1) so `1 - k` is a valid gate.
const FEATURE_EPS: f32 = 1e-6;
/// Initial low-rank gate bias; `sigmoid(3) ≈ 0.95` keeps early decay mild.
pub const GATE_BIAS: f32 = 3.0;
const SUM_NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Softmax { sinks: usize },
    Window(usize),
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGate {
    /// `[rank, d_model]`
    pub down: Linear,
    /// `[heads * d_head, rank]`
    pub up: Linear,
    /// `[heads * d_head]`
    pub bias: Tensor,
}

impl LowRankGate {
    pub fn random(rng: &mut ParamRng, cfg: &ModelConfig) -> Self {
        let r = cfg.gate_rank();
        Self {
            down: Linear::new(rng.matrix(r, cfg.d_model)),
            up: Linear::new(rng.matrix(cfg.heads * cfg.d_head, r)),
            bias: Tensor::filled(&[cfg.heads * cfg.d_head], GATE_BIAS),
        }
    }
}

/// Shape and behavior knobs shared by every branch of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub heads: usize,
    pub d_head: usize,
    pub rope_base: f32,
    pub chunk: usize,
    pub gate: GateKind,
    pub la_norm: LaNorm,
}

impl Geometry {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            heads: cfg.heads,
            d_head: cfg.d_head,
            rope_base: cfg.rope_base,
            chunk: cfg.chunk,
            gate: cfg.gate,
            la_norm: cfg.la_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub mechanism: Mechanism,
    pub geom: Geometry,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// `[heads, sinks, d_head]` learnable sink keys and values.
    pub sink_k: Option<Tensor>,
    pub sink_v: Option<Tensor>,
    pub gate: Option<LowRankGate>,
}

impl Branch {
    pub fn random(rng: &mut ParamRng, cfg: &ModelConfig, mechanism: Mechanism) -> Self {
        let d = cfg.d_model;
        let hd = cfg.heads * cfg.d_head;
        let wq = Linear::new(rng.matrix(hd, d));
        let wk = Linear::new(rng.matrix(hd, d));
        let wv = Linear::new(rng.matrix(hd, d));
        let wo = Linear::new(rng.matrix(d, hd));
        let (sink_k, sink_v) = match mechanism {
            Mechanism::Softmax { sinks } if sinks > 0 => {
                let bound = 1.0 / crate::math::sqrt(cfg.d_head as f32);
                (
                    Some(rng.tensor(&[cfg.heads, sinks, cfg.d_head], bound)),
                    Some(rng.tensor(&[cfg.heads, sinks, cfg.d_head], bound)),
                )
            }
            _ => (None, None),
        };
        let gate =
            (mechanism == Mechanism::Linear && cfg.gate == GateKind::LowRank).then(|| LowRankGate::random(rng, cfg));
        Self { mechanism, geom: Geometry::of(cfg), wq, wk, wv, wo, sink_k, sink_v, gate }
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.wq, &self.wk, &self.wv, &self.wo];
        if let Some(g) = &self.gate {
            v.push(&g.down);
            v.push(&g.up);
        }
        v
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v = vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo];
        if let Some(g) = &mut self.gate {
            v.push(&mut g.down);
            v.push(&mut g.up);
        }
        v
    }

    fn sinks(&self) -> usize {
        match self.mechanism {
            Mechanism::Softmax { sinks } => sinks,
            _ => 0,
        }
    }

    fn value_width(&self) -> usize {
        match (self.mechanism, self.geom.la_norm) {
            (Mechanism::Linear, LaNorm::Sum) => self.geom.d_head + 1,
            _ => self.geom.d_head,
        }
    }

    pub fn new_cache(&self) -> BranchCache {
        let g = &self.geom;
        match self.mechanism {
            Mechanism::Linear => BranchCache::Recurrent(RecurrentState::zeros(g.heads, g.d_head, self.value_width())),
            Mechanism::Window(w) => BranchCache::Kv(KvCache::new(g.heads, g.d_head, Some(w))),
            Mechanism::Softmax { sinks } => {
                let mut c = KvCache::new(g.heads, g.d_head, None);
                if let (Some(k), Some(v)) = (&self.sink_k, &self.sink_v) {
                    for h in 0..g.heads {
                        c.keys[h].extend_from_slice(&k.data()[h * sinks * g.d_head..(h + 1) * sinks * g.d_head]);
                        c.values[h].extend_from_slice(&v.data()[h * sinks * g.d_head..(h + 1) * sinks * g.d_head]);
                    }
                    c.pinned = sinks;
                }
                BranchCache::Kv(c)
            }
        }
    }

    /// Query, key and value heads `[heads, n, d]` as fed to the attention
    /// kernel, plus the forget gate for gated linear branches.
    pub fn features(
        &self,
        x: &Tensor,
        pos0: usize,
        mode: &mut Mode<'_>,
    ) -> Result<(AttentionInputs, Option<GateVector>)> {
        let g = self.geom;
        let (n, _) = x.dims2()?;
        let mut q = self.wq.forward(x, mode)?;
        let mut k = self.wk.forward(x, mode)?;
        let v = self.wv.forward(x, mode)?;
        match self.mechanism {
            Mechanism::Softmax { .. } | Mechanism::Window(_) => {
                let mut qh = to_heads(&q, g.heads, g.d_head);
                let mut kh = to_heads(&k, g.heads, g.d_head);
                rope(&mut qh, pos0, g.rope_base);
                rope(&mut kh, pos0, g.rope_base);
                let scale = 1.0 / crate::math::sqrt(g.d_head as f32);
                qh.data_mut().iter_mut().for_each(|x| *x *= scale);
                Ok((AttentionInputs::new(qh, kh, to_heads(&v, g.heads, g.d_head))?, None))
            }
            Mechanism::Linear => {
                let feat = |x: &mut f32| *x = sigmoid(*x).clamp(FEATURE_EPS, 1.0 - FEATURE_EPS);
                q.data_mut().iter_mut().for_each(feat);
                k.data_mut().iter_mut().for_each(feat);
                let gate = match g.gate {
                    GateKind::None => None,
                    GateKind::KeyTied => Some(k.map(|x| 1.0 - x)),
                    GateKind::LowRank => {
                        let lr = self.gate.as_ref().ok_or_else(|| Error::Config("missing low-rank gate".into()))?;
                        let mut z = lr.up.forward(&lr.down.forward(x, mode)?, mode)?;
                        for row in z.data_mut().chunks_exact_mut(g.heads * g.d_head) {
                            for (zi, b) in row.iter_mut().zip(lr.bias.data()) {
                                *zi = sigmoid(*zi + b);
                            }
                        }
                        Some(z)
                    }
                };
                let vh = if g.la_norm == LaNorm::Sum {
                    // a constant ones column accumulates the normalizer q · Σ k
                    let mut aug = Tensor::zeros(&[g.heads, n, g.d_head + 1]);
                    for h in 0..g.heads {
                        for t in 0..n {
                            let dst =
                                &mut aug.data_mut()[(h * n + t) * (g.d_head + 1)..(h * n + t + 1) * (g.d_head + 1)];
                            dst[..g.d_head].copy_from_slice(&v.row(t)[h * g.d_head..(h + 1) * g.d_head]);
                            dst[g.d_head] = 1.0;
                        }
                    }
                    aug
                } else {
                    to_heads(&v, g.heads, g.d_head)
                };
                let gate = match gate {
                    Some(gt) => Some(GateVector::new_closed(to_heads(&gt, g.heads, g.d_head))?),
                    None => None,
                };
                let inp = AttentionInputs::new(to_heads(&q, g.heads, g.d_head), to_heads(&k, g.heads, g.d_head), vh)?;
                Ok((inp, gate))
            }
        }
    }

    /// Branch output `[n, d_model]` for rows starting at absolute position
    /// `pos0`, advancing `cache`.
    pub fn forward(&self, x: &Tensor, pos0: usize, cache: &mut BranchCache, mode: &mut Mode<'_>) -> Result<Tensor> {
        let (n, _) = x.dims2()?;
        let (inp, gate) = self.features(x, pos0, mode)?;
        let heads_out = match (self.mechanism, cache) {
            (Mechanism::Linear, BranchCache::Recurrent(state)) => {
                if state.s.shape() != [self.geom.heads, self.geom.d_head, self.value_width()] {
                    return Err(Error::CacheMismatch);
                }
                let mut o = if n == 1 {
                    let q = inp.q.data();
                    let o = state.step(q, inp.k.data(), inp.v.data(), gate.as_ref().map(|g| g.tensor().data()))?;
                    o.reshape(&[self.geom.heads, 1, self.value_width()])?
                } else {
                    let taken = core::mem::replace(state, RecurrentState::zeros(0, 0, 0));
                    let (o, s) = gla_chunkwise_with_state(&inp, gate.as_ref(), self.geom.chunk, taken)?;
                    *state = s;
                    o
                };
                self.normalize_linear(&mut o);
                o
            }
            (Mechanism::Softmax { .. } | Mechanism::Window(_), BranchCache::Kv(kv)) => {
                if kv.heads() != self.geom.heads || kv.d != self.geom.d_head {
                    return Err(Error::CacheMismatch);
                }
                if kv.tokens == 0 {
                    let o = self.batch_softmax(&inp)?;
                    kv.append(&inp.k, &inp.v);
                    o
                } else {
                    kv.step_all(&inp)
                }
            }
            _ => return Err(Error::CacheMismatch),
        };
        let merged = from_heads(&heads_out, self.geom.d_head);
        self.wo.forward(&merged, mode)
    }

    fn batch_softmax(&self, inp: &AttentionInputs) -> Result<Tensor> {
        match self.mechanism {
            Mechanism::Window(w) => swa(inp, w),
            Mechanism::Softmax { sinks } if sinks > 0 => {
                let (Some(sk), Some(sv)) = (&self.sink_k, &self.sink_v) else {
                    return Err(Error::Config("missing sink parameters".into()));
                };
                let (h, n, d) = inp.q.dims3()?;
                let q = concat_seq(&Tensor::zeros(&[h, sinks, d]), &inp.q);
                let k = concat_seq(sk, &inp.k);
                let v = concat_seq(sv, &inp.v);
                let full = softmax_attention(&AttentionInputs::new(q, k, v)?, sinks)?;
                let mut out = Tensor::zeros(&[h, n, d]);
                for hh in 0..h {
                    out.data_mut()[hh * n * d..(hh + 1) * n * d]
                        .copy_from_slice(&full.data()[(hh * (n + sinks) + sinks) * d..(hh + 1) * (n + sinks) * d]);
                }
                Ok(out)
            }
            Mechanism::Softmax { .. } => softmax_attention(inp, 0),
            Mechanism::Linear => unreachable!("linear branches do not use the softmax path"),
        }
    }

    /// Per-head RMS normalization or division by the accumulated normalizer
    /// column; leaves `[heads, n, d_head]`.
    fn normalize_linear(&self, o: &mut Tensor) {
        let (h, n, w) = o.dims3().expect("rank 3");
        let d = self.geom.d_head;
        match self.geom.la_norm {
            LaNorm::Rms => {
                for row in o.data_mut().chunks_exact_mut(w) {
                    rms_norm_in_place(row, None);
                }
            }
            LaNorm::Sum => {
                let mut out = Vec::with_capacity(h * n * d);
                for row in o.data().chunks_exact(w) {
                    let den = row[d] + SUM_NORM_EPS;
                    out.extend(row[..d].iter().map(|x| x / den));
                }
                *o = Tensor::from_parts(vec![h, n, d], out).expect("shape by construction");
            }
        }
    }

    pub fn sink_count(&self) -> usize {
        self.sinks()
    }
}

/// Rolling (windowed) or growing key/value store, one contiguous buffer
/// per head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub d: usize,
    /// Maximum number of token entries kept; `None` keeps everything.
    pub capacity: Option<usize>,
    /// Leading sink entries that are never evicted.
    pub pinned: usize,
    /// Tokens consumed so far.
    pub tokens: usize,
    scores: Vec<f32>,
}

impl KvCache {
    pub fn new(heads: usize, d: usize, capacity: Option<usize>) -> Self {
        Self {
            keys: vec![Vec::new(); heads],
            values: vec![Vec::new(); heads],
            d,
            capacity,
            pinned: 0,
            tokens: 0,
            scores: Vec::new(),
        }
    }

    pub fn heads(&self) -> usize {
        self.keys.len()
    }

    /// Entries currently held per head, sinks included.
    pub fn entries(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len() / self.d.max(1))
    }

    pub fn nbytes(&self) -> usize {
        self.keys.iter().chain(&self.values).map(|b| b.len() * 4).sum()
    }

    fn trim(&mut self) {
        if let Some(cap) = self.capacity {
            let held = self.entries() - self.pinned;
            if held > cap {
                let drop = (held - cap) * self.d;
                let start = self.pinned * self.d;
                for b in self.keys.iter_mut().chain(self.values.iter_mut()) {
                    b.drain(start..start + drop);
                }
            }
        }
    }

    /// Appends `[heads, n, d]` keys and values.
    fn append(&mut self, k: &Tensor, v: &Tensor) {
        let (h, n, d) = k.dims3().expect("rank 3");
        for hh in 0..h {
            self.keys[hh].extend_from_slice(&k.data()[hh * n * d..(hh + 1) * n * d]);
            self.values[hh].extend_from_slice(&v.data()[hh * n * d..(hh + 1) * n * d]);
        }
        self.tokens += n;
        self.trim();
    }

    /// Token-by-token append-and-attend.
    fn step_all(&mut self, inp: &AttentionInputs) -> Tensor {
        let (h, n, d) = (inp.heads(), inp.seq(), inp.d_k());
        let mut out = Tensor::zeros(&[h, n, d]);
        for t in 0..n {
            for hh in 0..h {
                let at = (hh * n + t) * d;
                self.keys[hh].extend_from_slice(&inp.k.data()[at..at + d]);
                self.values[hh].extend_from_slice(&inp.v.data()[at..at + d]);
            }
            self.tokens += 1;
            self.trim();
            for hh in 0..h {
                let at = (hh * n + t) * d;
                attend(
                    &inp.q.data()[at..at + d],
                    &self.keys[hh],
                    &self.values[hh],
                    &mut self.scores,
                    &mut out.data_mut()[at..at + d],
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchCache {
    Kv(KvCache),
    Recurrent(RecurrentState),
}

impl BranchCache {
    pub fn nbytes(&self) -> usize {
        match self {
            BranchCache::Kv(c) => c.nbytes(),
            BranchCache::Recurrent(s) => s.nbytes(),
        }
    }
}

/// `[n, heads * d]` to `[heads, n, d]`.
pub fn to_heads(x: &Tensor, heads: usize, d: usize) -> Tensor {
    let n = x.len() / (heads * d);
    let mut out = vec![0.0f32; x.len()];
    for t in 0..n {
        for h in 0..heads {
            out[(h * n + t) * d..(h * n + t + 1) * d]
                .copy_from_slice(&x.data()[(t * heads + h) * d..(t * heads + h + 1) * d]);
        }
    }
    Tensor::from_parts(vec![heads, n, d], out).expect("shape by construction")
}

/// `[heads, n, d]` to `[n, heads * d]`, keeping the first `d` columns.
pub fn from_heads(x: &Tensor, d: usize) -> Tensor {
    let (heads, n, w) = x.dims3().expect("rank 3");
    let mut out = vec![0.0f32; n * heads * d];
    for h in 0..heads {
        for t in 0..n {
            out[(t * heads + h) * d..(t * heads + h + 1) * d]
                .copy_from_slice(&x.data()[(h * n + t) * w..(h * n + t) * w + d]);
        }
    }
    Tensor::from_parts(vec![n, heads * d], out).expect("shape by construction")
}

fn concat_seq(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, na, d) = a.dims3().expect("rank 3");
    let (_, nb, _) = b.dims3().expect("rank 3");
    let mut out = Vec::with_capacity(h * (na + nb) * d);
    for hh in 0..h {
        out.extend_from_slice(&a.data()[hh * na * d..(hh + 1) * na * d]);
        out.extend_from_slice(&b.data()[hh * nb * d..(hh + 1) * nb * d]);
    }
    Tensor::from_parts(vec![h, na + nb, d], out).expect("shape by construction")
}

/// Rotary embedding on `[heads, n, d]` rows at absolute positions
/// `pos0..pos0 + n`, rotating the pairs `(i, i + d/2)`.
pub fn rope(x: &mut Tensor, pos0: usize, base: f32) {
    let (heads, n, d) = x.dims3().expect("rank 3");
    let half = d / 2;
    let inv: Vec<f64> = (0..half).map(|i| libm::pow(base as f64, -2.0 * i as f64 / d as f64)).collect();
    let mut trig = vec![(0.0f32, 0.0f32); n * half];
    for t in 0..n {
        for (i, f) in inv.iter().enumerate() {
            let a = (pos0 + t) as f64 * f;
            trig[t * half + i] = (libm::cos(a) as f32, libm::sin(a) as f32);
        }
    }
    for h in 0..heads {
        for t in 0..n {
            let row = &mut x.data_mut()[(h * n + t) * d..(h * n + t + 1) * d];
            for i in 0..half {
                let (c, s) = trig[t * half + i];
                let (a, b) = (row[i], row[i + half]);
                row[i] = a * c - b * s;
                row[i + half] = a * s + b * c;
            }
        }
    }
}
