//! Scalar and small dense linear-algebra helpers shared by the kernels.
//!
//! All reductions accumulate in `f32` in index order.

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Tensor};

pub const RMS_EPS: f32 = 1e-6;

#[inline]
pub fn exp(x: f32) -> f32 {
    libm::expf(x)
}

#[inline]
pub fn sqrt(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[i] += alpha * x[i]`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `y = W x` for `W` stored row-major as `[out, in]`.
pub fn matvec(w: &[f32], inputs: usize, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), inputs);
    for (o, row) in y.iter_mut().zip(w.chunks_exact(inputs)) {
        *o = dot(row, x);
    }
}

/// `x [n, in] · W^T` for `W [out, in]`, giving `[n, out]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, d_in) = x.dims2()?;
    let (d_out, w_in) = w.dims2()?;
    if d_in != w_in {
        return Err(Error::shape(alloc::format!("input width {d_in} does not match weight [{d_out}, {w_in}]")));
    }
    let mut out = Tensor::zeros(&[n, d_out]);
    for i in 0..n {
        matvec(w.data(), d_in, x.row(i), out.row_mut(i));
    }
    Ok(out)
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// RMS-normalizes `x` in place and multiplies by `gain` when given.
pub fn rms_norm_in_place(x: &mut [f32], gain: Option<&[f32]>) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len().max(1) as f32;
    let inv = 1.0 / sqrt(ms + RMS_EPS);
    match gain {
        Some(g) => {
            for (v, g) in x.iter_mut().zip(g) {
                *v = *v * inv * g;
            }
        }
        None => {
            for v in x.iter_mut() {
                *v *= inv;
            }
        }
    }
}

/// Row-wise RMS norm of a `[n, d]` tensor.
pub fn rms_norm_rows(x: &Tensor, gain: Option<&[f32]>) -> Tensor {
    let mut out = x.clone();
    let d = *x.shape().last().unwrap_or(&1);
    for row in out.data_mut().chunks_exact_mut(d.max(1)) {
        rms_norm_in_place(row, gain);
    }
    out
}

/// `||a - b|| / max(||b||, tiny)`, computed in `f64`.
pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err length mismatch");
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        num += d * d;
        den += (y as f64) * (y as f64);
    }
    libm::sqrt(num) / libm::sqrt(den).max(1e-30)
}

/// Deterministic parameter source. Every draw is uniform in `[-bound, bound)`.
#[derive(Debug, Clone)]
pub struct ParamRng(ChaCha8Rng);

impl ParamRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Fresh 64-bit seed for a derived generator.
    pub fn next_seed(&mut self) -> u64 {
        self.0.random::<u64>()
    }

    pub fn uniform(&mut self, bound: f32) -> f32 {
        (self.0.random::<f32>() * 2.0 - 1.0) * bound
    }

    pub fn uniform_vec(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform(bound)).collect()
    }

    /// `[rows, cols]` matrix scaled by `1/sqrt(cols)`.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = 1.0 / sqrt(cols as f32);
        let data = self.uniform_vec(rows * cols, bound);
        Tensor::from_parts(alloc::vec![rows, cols], data).expect("shape matches by construction")
    }

    pub fn tensor(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), self.uniform_vec(n, bound)).expect("shape matches by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_single_element_is_one() {
        let mut xs = [3.7f32];
        softmax_in_place(&mut xs);
        assert_eq!(xs[0], 1.0);
    }

    #[test]
    fn rms_norm_gives_unit_rms() {
        let mut x = [3.0f32, -4.0, 0.0, 1.0];
        rms_norm_in_place(&mut x, None);
        let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-5);
    }

    #[test]
    fn param_rng_is_deterministic() {
        let a = ParamRng::new(9).uniform_vec(16, 1.0);
        let b = ParamRng::new(9).uniform_vec(16, 1.0);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}
