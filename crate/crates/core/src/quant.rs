//! Symmetric INT8 weight quantization and the W8 + spike projection.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::spike::{encode, round_half_away, Granularity, SpikeCountTensor};
use crate::{Error, Result, Tensor};

/// Scale used for all-zero rows.
pub const ZERO_SCALE: f32 = 1e-6;

/// Per-output-channel symmetric INT8 matrix, `q ∈ [-127, 127]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub q: Vec<i8>,
    pub scale: Vec<f32>,
}

impl QuantizedMatrix {
    pub fn dequantize(&self) -> Tensor {
        let data = self
            .q
            .chunks_exact(self.cols)
            .zip(&self.scale)
            .flat_map(|(row, &s)| row.iter().map(move |&q| s * q as f32))
            .collect();
        Tensor::from_parts(alloc::vec![self.rows, self.cols], data).expect("rows × cols")
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.q[r * self.cols..(r + 1) * self.cols]
    }
}

/// Quantizes each row with `scale = max|row| / 127`, `q = round(w / scale)`.
pub fn quantize_weights(w: &Tensor) -> Result<QuantizedMatrix> {
    let (rows, cols) = w.dims2()?;
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut q = Vec::with_capacity(rows * cols);
    let mut scale = Vec::with_capacity(rows);
    for row in w.data().chunks_exact(cols.max(1)).take(rows) {
        let max = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if max == 0.0 {
            scale.push(ZERO_SCALE);
            q.extend(core::iter::repeat(0i8).take(cols));
            continue;
        }
        scale.push(max / 127.0);
        // w * 127 / max keeps the row extremes exactly at ±127
        q.extend(row.iter().map(|&v| round_half_away(v * 127.0 / max).clamp(-127.0, 127.0) as i8));
    }
    Ok(QuantizedMatrix { rows, cols, q, scale })
}

fn reconstruction_mse(samples: &[Tensor], k: f32, granularity: Granularity) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for x in samples {
        let r = encode(x, k, granularity)?.reconstruct();
        for (a, b) in x.data().iter().zip(r.data()) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
        n += x.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// Picks the `k` from `k_grid` with the lowest encode/decode MSE over the
/// samples. Ties go to the earliest grid entry.
pub fn calibrate_k(samples: &[Tensor], k_grid: &[f32], granularity: Granularity) -> Result<f32> {
    if samples.is_empty() || k_grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best: Option<(f32, f64)> = None;
    for &k in k_grid {
        let mse = reconstruction_mse(samples, k, granularity)?;
        if best.map_or(true, |(_, m)| mse < m) {
            best = Some((k, mse));
        }
    }
    Ok(best.expect("grid is nonempty").0)
}

/// `y = (scale ⊙ v_th) ⊙ (q · counts)` with the integer product in `i64`.
pub fn w8_spike_project(wq: &QuantizedMatrix, counts: &SpikeCountTensor) -> Result<Tensor> {
    let d_in = counts.row_len();
    if d_in != wq.cols {
        return Err(Error::shape(alloc::format!(
            "quantized weight [{}, {}] cannot project rows of width {d_in}",
            wq.rows,
            wq.cols
        )));
    }
    let rows = counts.rows();
    let mut out = Tensor::zeros(&[rows, wq.rows]);
    for r in 0..rows {
        let c = &counts.counts[r * d_in..(r + 1) * d_in];
        let th = counts.row_threshold(r);
        for (o, y) in out.row_mut(r).iter_mut().enumerate() {
            let mut acc = 0i64;
            for (&q, &ci) in wq.row(o).iter().zip(c) {
                acc = acc.checked_add(q as i64 * ci as i64).ok_or(Error::IntegerOverflow)?;
            }
            *y = (wq.scale[o] * th) * acc as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    extern crate std;

    use std::vec;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::math::{linear, ParamRng};

    fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn extremes_and_midpoint() {
        let w = Tensor::new(vec![1, 3], vec![-1.0, 0.5, 1.0]).unwrap();
        let q = quantize_weights(&w).unwrap();
        assert_eq!(q.q, vec![-127, 64, 127]);
        assert_eq!(q.scale, vec![1.0 / 127.0]);
    }

    #[test]
    fn zero_matrix_is_exact() {
        let q = quantize_weights(&Tensor::zeros(&[3, 4])).unwrap();
        assert!(q.q.iter().all(|&v| v == 0));
        assert_eq!(q.dequantize(), Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn gaussian_dequant_error_within_half_scale() {
        let w = gaussian(1, &[32, 64]);
        let q = quantize_weights(&w).unwrap();
        let d = q.dequantize();
        for r in 0..32 {
            let half = q.scale[r] as f64 / 2.0;
            for (a, b) in w.row(r).iter().zip(d.row(r)) {
                assert!((*a as f64 - *b as f64).abs() <= half * (1.0 + 1e-5));
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let w = Tensor::from_parts(vec![1, 2], vec![1.0, f32::INFINITY]).unwrap();
        assert_eq!(quantize_weights(&w), Err(Error::NonFinite));
    }

    #[test]
    fn singleton_grid() {
        let s = [gaussian(2, &[4, 16])];
        assert_eq!(calibrate_k(&s, &[3.0], Granularity::PerToken).unwrap(), 3.0);
        assert_eq!(calibrate_k(&[], &[3.0], Granularity::PerToken), Err(Error::EmptyInput));
        assert_eq!(calibrate_k(&s, &[], Granularity::PerToken), Err(Error::EmptyInput));
    }

    #[test]
    fn calibrated_k_minimizes_grid_mse() {
        let samples: Vec<Tensor> = (0..8).map(|i| gaussian(10 + i, &[4, 64])).collect();
        let grid = [0.5, 1.0, 2.0, 4.0];
        let k = calibrate_k(&samples, &grid, Granularity::PerToken).unwrap();
        let best = reconstruction_mse(&samples, k, Granularity::PerToken).unwrap();
        for g in grid {
            assert!(best <= reconstruction_mse(&samples, g, Granularity::PerToken).unwrap());
        }
    }

    #[test]
    fn constant_samples_prefer_fine_quantization() {
        let samples = [Tensor::filled(&[2, 8], 0.7)];
        let grid = [0.5, 1.0, 2.0, 4.0];
        let k = calibrate_k(&samples, &grid, Granularity::PerToken).unwrap();
        let largest = reconstruction_mse(&samples, 4.0, Granularity::PerToken).unwrap();
        assert_eq!(reconstruction_mse(&samples, k, Granularity::PerToken).unwrap(), largest);
    }

    #[test]
    fn silent_counts_project_to_zero() {
        let q = quantize_weights(&gaussian(3, &[4, 6])).unwrap();
        let c = SpikeCountTensor { shape: vec![2, 6], counts: vec![0; 12], v_th: vec![1.0], k: None };
        assert!(w8_spike_project(&q, &c).unwrap().data().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn grid_aligned_inputs_are_exact() {
        // weights on a 1/127 grid with a ±1 extreme, activations on a 0.5 grid
        let w = Tensor::new(vec![2, 3], vec![1.0, -64.0 / 127.0, 3.0 / 127.0, -1.0, 0.0, 127.0 / 127.0]).unwrap();
        let q = quantize_weights(&w).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.5, -0.5, 2.0]).unwrap();
        let c = SpikeCountTensor { shape: vec![1, 3], counts: vec![3, -1, 4], v_th: vec![0.5], k: None };
        let y = w8_spike_project(&q, &c).unwrap();
        let float = linear(&x, &q.dequantize()).unwrap();
        for (a, b) in y.data().iter().zip(float.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn higher_k_is_more_faithful() {
        let mut wins = 0;
        for seed in 0..40 {
            let w = ParamRng::new(seed).matrix(32, 64);
            let x = gaussian(1000 + seed, &[8, 64]);
            let float = linear(&x, &w).unwrap();
            let q = quantize_weights(&w).unwrap();
            let err = |k: f32| {
                let c = encode(&x, k, Granularity::PerToken).unwrap();
                crate::math::rel_err(w8_spike_project(&q, &c).unwrap().data(), float.data())
            };
            if err(4.0) < err(1.0) {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * 40.0, "{wins}/40");
    }

    #[test]
    fn projection_error_within_first_order_bound() {
        for seed in 0..10 {
            let w = ParamRng::new(seed).matrix(16, 32);
            let x = gaussian(500 + seed, &[4, 32]);
            let q = quantize_weights(&w).unwrap();
            let c = encode(&x, 2.0, Granularity::PerToken).unwrap();
            let y = w8_spike_project(&q, &c).unwrap();
            let float = linear(&x, &w).unwrap();
            for r in 0..4 {
                let th = c.row_threshold(r) as f64;
                for o in 0..16 {
                    // |ΔW|·|x| + |W|·|Δx| with |ΔW| ≤ scale/2 and |Δx| ≤ v_th/2
                    let bound: f64 = (0..32)
                        .map(|i| {
                            let wi = w.data()[o * 32 + i].abs() as f64;
                            let xi = x.row(r)[i].abs() as f64;
                            q.scale[o] as f64 / 2.0 * xi + wi * th / 2.0
                        })
                        .sum();
                    let err = (y.row(r)[o] as f64 - float.row(r)[o] as f64).abs();
                    assert!(err <= 2.0 * bound, "seed {seed} row {r} out {o}: {err} > 2·{bound}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn negation_symmetry(ws in prop::collection::vec(-10.0f32..10.0, 1..48)) {
            let n = ws.len();
            let w = Tensor::new(vec![1, n], ws).unwrap();
            let a = quantize_weights(&w).unwrap();
            let b = quantize_weights(&w.scale(-1.0)).unwrap();
            let neg: Vec<i8> = a.q.iter().map(|v| -v).collect();
            prop_assert_eq!(b.q, neg);
            prop_assert_eq!(a.scale, b.scale);
        }
    }
}
