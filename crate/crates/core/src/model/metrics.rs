use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reference throughput figures quoted alongside desk-scale measurements.
pub const REFERENCE_TGS: f64 = 1558.0;
pub const REFERENCE_MFU: f64 = 0.234;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope · x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::shape("fit needs matching x and y lengths"));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("fit needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept: my - slope * mx, r2 })
}

/// Slope of `log(time)` against `log(n)`.
pub fn loglog_slope(lengths: &[usize], seconds: &[f64]) -> Result<f64> {
    if seconds.iter().any(|&s| !(s > 0.0)) || lengths.contains(&0) {
        return Err(Error::invalid("log-log fit needs positive lengths and times"));
    }
    let xs: alloc::vec::Vec<f64> = lengths.iter().map(|&n| libm::log(n as f64)).collect();
    let ys: alloc::vec::Vec<f64> = seconds.iter().map(|&s| libm::log(s)).collect();
    Ok(linear_fit(&xs, &ys)?.slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Tokens per second per device.
    pub tgs: f64,
    /// Achieved over peak FLOPs with the forward-only `2 · params · tokens`.
    pub mfu: f64,
    pub peak_flops: f64,
    pub reference_tgs: f64,
    pub reference_mfu: f64,
}

pub fn tgs_mfu_report(
    tokens: u64,
    seconds: f64,
    devices: u32,
    params: u64,
    peak_flops: f64,
) -> Result<ThroughputReport> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::invalid("elapsed time must be positive"));
    }
    if devices == 0 || !(peak_flops > 0.0) {
        return Err(Error::invalid("device count and peak FLOPs must be positive"));
    }
    let tgs = tokens as f64 / seconds / devices as f64;
    let achieved = 2.0 * params as f64 * tokens as f64 / seconds;
    Ok(ThroughputReport {
        tgs,
        mfu: achieved / (peak_flops * devices as f64),
        peak_flops,
        reference_tgs: REFERENCE_TGS,
        reference_mfu: REFERENCE_MFU,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tgs_definition() {
        let r = tgs_mfu_report(1024, 1.0, 1, 1000, 1e9).unwrap();
        assert_eq!(r.tgs, 1024.0);
        assert!((r.mfu - 2.0 * 1000.0 * 1024.0 / 1e9).abs() < 1e-15);
        let slow = tgs_mfu_report(1024, 2.0, 1, 1000, 1e9).unwrap();
        assert_eq!(slow.tgs, 512.0);
        assert_eq!(r.reference_tgs, 1558.0);
        assert_eq!(r.reference_mfu, 0.234);
        assert!(tgs_mfu_report(1, 0.0, 1, 1, 1.0).is_err());
    }

    #[test]
    fn loglog_recovers_power() {
        let ns = [1000usize, 2000, 4000, 8000];
        let quad: alloc::vec::Vec<f64> = ns.iter().map(|&n| 3e-9 * (n as f64).powi(2)).collect();
        assert!((loglog_slope(&ns, &quad).unwrap() - 2.0).abs() < 1e-9);
        let lin: alloc::vec::Vec<f64> = ns.iter().map(|&n| 5e-6 * n as f64).collect();
        assert!((loglog_slope(&ns, &lin).unwrap() - 1.0).abs() < 1e-9);
        assert!(loglog_slope(&[10], &[1.0]).is_err());
    }

    #[test]
    fn fit_r2() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!((f.slope, f.intercept, f.r2), (2.0, 0.0, 1.0));
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
