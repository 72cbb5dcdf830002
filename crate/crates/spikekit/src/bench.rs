//! Prefill wall-time scaling.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use spikekit_core::model::{loglog_slope, tgs_mfu_report, Model, ThroughputReport};

use crate::{Error, Result};

/// Nominal single-core peak used for MFU, in FLOP/s.
pub const HOST_PEAK_FLOPS: f64 = 1.0e11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    /// Mean prefill seconds per length.
    pub seconds: Vec<f64>,
    /// Least-squares slope of log(seconds) against log(length).
    pub exponent: f64,
    /// Throughput at the longest length.
    pub throughput: ThroughputReport,
    pub params: u64,
}

/// Deterministic synthetic prompt of `n` ids.
pub fn synthetic_tokens(n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|i| ((i as u64 * 2_654_435_761) % vocab as u64) as u32).collect()
}

pub fn benchmark_prefill(model: &Model, lengths: &[usize], repeats: usize) -> Result<BenchReport> {
    if lengths.len() < 2 {
        return Err(Error::Usage("benchmark needs at least two lengths to fit an exponent".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Usage("benchmark lengths must be positive and strictly ascending".into()));
    }
    if repeats == 0 {
        return Err(Error::Usage("repeats must be at least 1".into()));
    }
    let vocab = model.config.vocab;
    // warm caches and allocator on the shortest prompt
    model.prefill(&synthetic_tokens(lengths[0], vocab))?;
    let mut seconds = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let toks = synthetic_tokens(n, vocab);
        let mut total = 0.0;
        for _ in 0..repeats {
            let start = Instant::now();
            let (logits, _) = model.prefill(&toks)?;
            total += start.elapsed().as_secs_f64();
            std::hint::black_box(logits);
        }
        seconds.push(total / repeats as f64);
    }
    let exponent = loglog_slope(lengths, &seconds)?;
    let params = model.param_count() as u64;
    let last = lengths.len() - 1;
    let throughput = tgs_mfu_report(lengths[last] as u64, seconds[last], 1, params, HOST_PEAK_FLOPS)?;
    Ok(BenchReport { lengths: lengths.to_vec(), repeats, seconds, exponent, throughput, params })
}
