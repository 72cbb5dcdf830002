use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

/// Threshold used when every activation in a group is zero.
pub const ZERO_THRESHOLD: f32 = 1e-6;

/// Axis over which `mean|x|` is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One threshold per row of the last dimension.
    #[default]
    PerToken,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(Self::PerTensor),
            "per_token" => Ok(Self::PerToken),
            other => Err(Error::invalid(alloc::format!("unknown granularity `{other}`"))),
        }
    }
}

/// Integer spike counts plus the thresholds that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeCountTensor {
    pub shape: Vec<usize>,
    pub counts: Vec<i32>,
    /// Length 1 (per tensor) or one entry per row.
    pub v_th: Vec<f32>,
    pub k: Option<f32>,
}

impl SpikeCountTensor {
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1).max(1)
    }

    pub fn rows(&self) -> usize {
        self.counts.len() / self.row_len()
    }

    /// Threshold applying to element `i`.
    pub fn threshold_at(&self, i: usize) -> f32 {
        if self.v_th.len() == 1 {
            self.v_th[0]
        } else {
            self.v_th[i / self.row_len()]
        }
    }

    pub fn row_threshold(&self, row: usize) -> f32 {
        if self.v_th.len() == 1 {
            self.v_th[0]
        } else {
            self.v_th[row]
        }
    }

    /// `v_th · count` for every element.
    pub fn reconstruct(&self) -> Tensor {
        let data = self.counts.iter().enumerate().map(|(i, &c)| self.threshold_at(i) * c as f32).collect();
        Tensor::from_parts(self.shape.clone(), data).expect("counts cover the shape")
    }

    pub fn max_abs(&self) -> u32 {
        self.counts.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }
}

/// `mean|x| / k` over the whole tensor or per row of the last dimension.
///
/// Groups whose mean is zero get [`ZERO_THRESHOLD`].
pub fn adaptive_threshold(x: &Tensor, k: f32, granularity: Granularity) -> Result<Tensor> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::invalid(alloc::format!("k must be positive, got {k}")));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let group = match granularity {
        Granularity::PerTensor => x.len(),
        Granularity::PerToken => x.shape().last().copied().unwrap_or(1).max(1),
    };
    let v_th: Vec<f32> = x
        .data()
        .chunks_exact(group)
        .map(|g| {
            let mean = g.iter().map(|v| v.abs() as f64).sum::<f64>() / g.len() as f64;
            let th = (mean / k as f64) as f32;
            if th > 0.0 {
                th
            } else {
                ZERO_THRESHOLD
            }
        })
        .collect();
    let n = v_th.len();
    Tensor::new(alloc::vec![n], v_th)
}

/// Rounds half-way cases away from zero.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    libm::roundf(x)
}

/// `round(x / v_th)` elementwise. `v_th` holds one value or one per row.
pub fn encode_counts(x: &Tensor, v_th: &Tensor) -> Result<SpikeCountTensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let row_len = x.shape().last().copied().unwrap_or(1).max(1);
    let rows = x.len() / row_len;
    if v_th.len() != 1 && v_th.len() != rows {
        return Err(Error::shape(alloc::format!("{} thresholds for {} rows", v_th.len(), rows)));
    }
    if let Some(&bad) = v_th.data().iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::invalid(alloc::format!("threshold must be positive, got {bad}")));
    }
    let th = v_th.data();
    let counts = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let t = if th.len() == 1 { th[0] } else { th[i / row_len] };
            // f64 keeps the quotient of two f32 values off spurious half-way ties
            let c = libm::round(v as f64 / t as f64);
            if c.abs() > i32::MAX as f64 {
                Err(Error::IntegerOverflow)
            } else {
                Ok(c as i32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpikeCountTensor { shape: x.shape().to_vec(), counts, v_th: th.to_vec(), k: None })
}

/// Adaptive threshold followed by [`encode_counts`].
pub fn encode(x: &Tensor, k: f32, granularity: Granularity) -> Result<SpikeCountTensor> {
    let v_th = adaptive_threshold(x, k, granularity)?;
    let mut c = encode_counts(x, &v_th)?;
    c.k = Some(k);
    Ok(c)
}

#[cfg(test)]
mod tests {
    extern crate std;

    use std::vec;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn per_tensor_threshold_is_mean_abs() {
        let x = Tensor::new(vec![4], vec![1.0, -1.0, 3.0, -3.0]).unwrap();
        let th = adaptive_threshold(&x, 1.0, Granularity::PerTensor).unwrap();
        assert_eq!(th.data(), &[2.0]);
        let th = adaptive_threshold(&x, 4.0, Granularity::PerTensor).unwrap();
        assert_eq!(th.data(), &[0.5]);
    }

    #[test]
    fn per_token_threshold_is_per_row() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -3.0, 0.5, 0.5]).unwrap();
        let th = adaptive_threshold(&x, 1.0, Granularity::PerToken).unwrap();
        assert_eq!(th.data(), &[2.0, 0.5]);
    }

    #[test]
    fn zero_input_uses_epsilon_and_silent_counts() {
        let x = Tensor::zeros(&[3, 4]);
        let c = encode(&x, 1.0, Granularity::PerToken).unwrap();
        assert!(c.v_th.iter().all(|&t| t == ZERO_THRESHOLD));
        assert!(c.counts.iter().all(|&n| n == 0));
    }

    #[test]
    fn nonpositive_k_rejected() {
        let x = Tensor::filled(&[2], 1.0);
        assert!(adaptive_threshold(&x, 0.0, Granularity::PerTensor).is_err());
        assert!(adaptive_threshold(&x, -1.0, Granularity::PerTensor).is_err());
    }

    #[test]
    fn gaussian_threshold_near_point_eight_sigma() {
        let x = Tensor::new(vec![1_000_000], gaussian(42, 1_000_000)).unwrap();
        let th = adaptive_threshold(&x, 1.0, Granularity::PerTensor).unwrap().data()[0];
        let expected = (2.0f64 / core::f64::consts::PI).sqrt() as f32;
        assert!((th - expected).abs() / expected < 0.01, "{th}");
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let th = Tensor::new(vec![1], vec![2.0]).unwrap();
        let x = Tensor::new(vec![3], vec![5.0, -5.0, 1.0]).unwrap();
        assert_eq!(encode_counts(&x, &th).unwrap().counts, vec![3, -3, 1]);
        let th = Tensor::new(vec![1], vec![1.0]).unwrap();
        let x = Tensor::new(vec![1], vec![-3.9]).unwrap();
        assert_eq!(encode_counts(&x, &th).unwrap().counts, vec![-4]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let th = Tensor::new(vec![1], vec![1.0]).unwrap();
        let x = Tensor::from_parts(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert_eq!(encode_counts(&x, &th), Err(Error::NonFinite));
    }

    #[test]
    fn gaussian_reconstruction_within_half_threshold() {
        let x = Tensor::new(vec![64, 256], gaussian(7, 64 * 256)).unwrap();
        let c = encode(&x, 1.0, Granularity::PerToken).unwrap();
        let r = c.reconstruct();
        for (i, (a, b)) in x.data().iter().zip(r.data()).enumerate() {
            let th = c.threshold_at(i);
            assert!((a - b).abs() <= th / 2.0 * (1.0 + 1e-6), "element {i}");
        }
    }

    #[test]
    fn outlier_bursts_without_moving_threshold_much() {
        let mut data = gaussian(11, 4096);
        let base = adaptive_threshold(&Tensor::new(vec![4096], data.clone()).unwrap(), 1.0, Granularity::PerTensor)
            .unwrap()
            .data()[0];
        data[100] = 10.0;
        let x = Tensor::new(vec![4096], data).unwrap();
        let c = encode(&x, 1.0, Granularity::PerTensor).unwrap();
        let mut mags: Vec<u32> = c.counts.iter().map(|c| c.unsigned_abs()).collect();
        mags.sort_unstable();
        let median = mags[mags.len() / 2];
        assert!(c.counts[100].unsigned_abs() > median);
        // the threshold moves by far less than the outlier's share of the mass
        let shift = (c.v_th[0] - base).abs() / base;
        let outlier_share = 10.0 / (4096.0 * base);
        assert!(shift < outlier_share);
    }

    proptest! {
        #[test]
        fn reconstruction_error_bounded(xs in prop::collection::vec(-100.0f32..100.0, 1..64), k in 0.25f32..16.0) {
            let x = Tensor::new(vec![xs.len()], xs).unwrap();
            let c = encode(&x, k, Granularity::PerTensor).unwrap();
            let th = c.v_th[0];
            for (a, n) in x.data().iter().zip(&c.counts) {
                let err = (*a as f64 - th as f64 * *n as f64).abs();
                prop_assert!(err <= th as f64 / 2.0 * (1.0 + 1e-5) + 1e-12);
            }
        }

        #[test]
        fn counts_keep_sign(xs in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let x = Tensor::new(vec![xs.len()], xs).unwrap();
            let c = encode(&x, 1.0, Granularity::PerTensor).unwrap();
            for (a, n) in x.data().iter().zip(&c.counts) {
                prop_assert!(*n == 0 || (*n > 0) == (*a > 0.0));
            }
        }

        #[test]
        fn larger_k_never_shrinks_counts(xs in prop::collection::vec(-10.0f32..10.0, 1..64), k in 0.25f32..8.0, step in 1.0f32..4.0) {
            let x = Tensor::new(vec![xs.len()], xs).unwrap();
            let lo = encode(&x, k, Granularity::PerTensor).unwrap();
            let hi = encode(&x, k * step, Granularity::PerTensor).unwrap();
            for (a, b) in lo.counts.iter().zip(&hi.counts) {
                prop_assert!(b.unsigned_abs() >= a.unsigned_abs());
            }
        }
    }
}
