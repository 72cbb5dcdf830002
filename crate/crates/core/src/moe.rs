//! Top-k mixture of experts with shared experts and dense upcycling.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{sigmoid, silu, softmax_in_place, ParamRng};
use crate::proj::{Linear, Mode};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => silu(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Gated FFN: `down(act(gate x) ⊙ up x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFfn {
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
    pub activation: Activation,
}

impl DenseFfn {
    pub fn new(w_gate: Tensor, w_up: Tensor, w_down: Tensor, activation: Activation) -> Result<Self> {
        let (g_out, g_in) = w_gate.dims2()?;
        let (u_out, u_in) = w_up.dims2()?;
        let (d_out, d_in) = w_down.dims2()?;
        if g_out != u_out || g_out != d_in || g_in != u_in || d_out != g_in {
            return Err(Error::shape(alloc::format!(
                "ffn weights gate [{g_out}, {g_in}], up [{u_out}, {u_in}], down [{d_out}, {d_in}] disagree"
            )));
        }
        Ok(Self { w_gate: Linear::new(w_gate), w_up: Linear::new(w_up), w_down: Linear::new(w_down), activation })
    }

    pub fn random(rng: &mut ParamRng, d_model: usize, d_ff: usize, activation: Activation) -> Self {
        Self::new(rng.matrix(d_ff, d_model), rng.matrix(d_ff, d_model), rng.matrix(d_model, d_ff), activation)
            .expect("consistent shapes")
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.in_dim()
    }

    /// All three matrices multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            w_gate: self.w_gate.scaled(factor),
            w_up: self.w_up.scaled(factor),
            w_down: self.w_down.scaled(factor),
            activation: self.activation,
        }
    }

    /// Forward over rows of `x [n, d_model]`.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut h = self.w_gate.forward(x, mode)?;
        let up = self.w_up.forward(x, mode)?;
        for (g, u) in h.data_mut().iter_mut().zip(up.data()) {
            *g = self.activation.apply(*g) * u;
        }
        self.w_down.forward(&h, mode)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 3] {
        [&mut self.w_gate, &mut self.w_up, &mut self.w_down]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterFn {
    #[default]
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<DenseFfn>,
    pub shared: Vec<DenseFfn>,
    /// `[N, d_model]`
    pub router_w: Tensor,
    pub top_k: usize,
    pub sigma: RouterFn,
}

/// Selected experts (ascending ids) and the full probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub indices: Vec<usize>,
    pub probs: Vec<f32>,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.experts.len();
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::TopK { top_k: self.top_k, experts: n });
        }
        Ok(())
    }
}

/// Routes one token vector: `p = σ(W_r x)`, keep the `top_k` largest,
/// ties broken toward the lower expert id.
pub fn route(x: &[f32], layer: &MoeLayer) -> Result<RoutingDecision> {
    layer.validate()?;
    let (n, d) = layer.router_w.dims2()?;
    if x.len() != d || n != layer.experts.len() {
        return Err(Error::shape("router does not match token width or expert count"));
    }
    let mut probs = vec![0.0f32; n];
    crate::math::matvec(layer.router_w.data(), d, x, &mut probs);
    match layer.sigma {
        RouterFn::Softmax => softmax_in_place(&mut probs),
        RouterFn::Sigmoid => probs.iter_mut().for_each(|p| *p = sigmoid(*p)),
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut indices = order[..layer.top_k].to_vec();
    indices.sort_unstable();
    Ok(RoutingDecision { indices, probs })
}

/// `y = Σ_{i∈I} p_i E_i(x) + Σ_s E_s(x)` for every row of `x [n, d_model]`.
///
/// Rows routed to the same expert are evaluated together; each row still
/// accumulates its experts in ascending id order followed by the shared
/// experts.
pub fn moe_forward(x: &Tensor, layer: &MoeLayer, mode: &mut Mode<'_>) -> Result<(Tensor, Vec<RoutingDecision>)> {
    let (n, d) = x.dims2()?;
    let decisions = (0..n).map(|r| route(x.row(r), layer)).collect::<Result<Vec<_>>>()?;
    let mut out = Tensor::zeros(&[n, d]);
    for (e, expert) in layer.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&r| decisions[r].indices.contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        let mut gathered = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            gathered.extend_from_slice(x.row(r));
        }
        let y = expert.forward(&Tensor::from_parts(vec![rows.len(), d], gathered)?, mode)?;
        for (i, &r) in rows.iter().enumerate() {
            crate::math::axpy(decisions[r].probs[e], y.row(i), out.row_mut(r));
        }
    }
    for expert in &layer.shared {
        let y = expert.forward(x, mode)?;
        for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
            *o += v;
        }
    }
    Ok((out, decisions))
}

/// `(1 / (S + k/N))^(1/3)`.
pub fn scaling_factor(experts: usize, top_k: usize, shared: usize) -> Result<f64> {
    if experts == 0 || top_k == 0 || top_k > experts {
        return Err(Error::TopK { top_k, experts });
    }
    let mass = shared as f64 + top_k as f64 / experts as f64;
    if !(mass > 0.0) {
        return Err(Error::invalid("S + k/N must be positive"));
    }
    Ok(libm::cbrt(1.0 / mass))
}

/// Replicates `dense` into `experts` routed and `shared` shared experts, each
/// with all three matrices scaled by [`scaling_factor`], plus a seeded
/// router drawn uniformly from `±1/sqrt(d_model)`.
pub fn upcycle(dense: &DenseFfn, experts: usize, top_k: usize, shared: usize, seed: u64) -> Result<MoeLayer> {
    let f = scaling_factor(experts, top_k, shared)? as f32;
    let scaled = dense.scaled(f);
    let router_w = ParamRng::new(seed).matrix(experts, dense.d_model());
    Ok(MoeLayer {
        experts: vec![scaled.clone(); experts],
        shared: vec![scaled; shared],
        router_w,
        top_k,
        sigma: RouterFn::Softmax,
    })
}

/// `N · Σ_i f_i P_i`, with `f_i` the share of routing slots that went to
/// expert `i` and `P_i` its mean router probability. Equals 1 for perfectly
/// uniform routing.
pub fn load_balance_metric(decisions: &[RoutingDecision], experts: usize) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut slots = vec![0usize; experts];
    let mut prob = vec![0.0f64; experts];
    let mut total = 0usize;
    for d in decisions {
        if d.probs.len() != experts {
            return Err(Error::shape("decision probability width differs from expert count"));
        }
        for &i in &d.indices {
            slots[i] += 1;
            total += 1;
        }
        for (acc, &p) in prob.iter_mut().zip(&d.probs) {
            *acc += p as f64;
        }
    }
    let t = decisions.len() as f64;
    Ok(experts as f64 * slots.iter().zip(&prob).map(|(&s, &p)| (s as f64 / total as f64) * (p / t)).sum::<f64>())
}
