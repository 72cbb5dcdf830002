//! Firing statistics, energy estimates and time-neuron rasters.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::spike::{expand, Scheme, SpikeCountTensor, SpikeTrain};
use crate::{Error, Result};

/// Padding window used when none is given.
pub const DEFAULT_WINDOW: usize = 3;

/// Count ranges `[0, hi]` reported in [`FiringStats::frac_within`].
pub const WITHIN_BOUNDS: [u32; 5] = [0, 1, 3, 7, 15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinRange {
    pub lo: u32,
    pub hi: u32,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringStats {
    /// `|count| -> number of channels`.
    pub histogram: BTreeMap<u32, u64>,
    pub channels: u64,
    pub events: u64,
    pub avg_spikes_per_channel: f64,
    pub silent_fraction: f64,
    pub frac_within: Vec<WithinRange>,
    pub window: usize,
    pub windowed_sparsity: f64,
}

/// Slots a channel occupies once its train is padded to a multiple of
/// `window` (at least one window).
fn padded_len(len: usize, window: usize) -> usize {
    len.div_ceil(window).max(1) * window
}

/// Merges firing statistics over any number of count tensors, e.g. every
/// projection input of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringAccumulator {
    window: usize,
    histogram: BTreeMap<u32, u64>,
    channels: u64,
    silent: u64,
    events: u64,
    slots: u64,
}

impl FiringAccumulator {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidWindow);
        }
        Ok(Self { window, histogram: BTreeMap::new(), channels: 0, silent: 0, events: 0, slots: 0 })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Expands `counts` under `scheme` and records the result.
    pub fn record(&mut self, counts: &SpikeCountTensor, scheme: Scheme, bits: Option<u32>) -> Result<()> {
        let train = expand(counts, scheme, bits)?;
        self.record_train(counts, &train)
    }

    /// Records counts together with their expanded train.
    ///
    /// Rate-coded channels (binary, ternary) span `|count|` steps; bitwise
    /// channels span the full digit width.
    pub fn record_train(&mut self, counts: &SpikeCountTensor, train: &SpikeTrain) -> Result<()> {
        if train.channels() != counts.counts.len() {
            return Err(Error::shape("train and counts cover different channel counts"));
        }
        for (ch, &c) in counts.counts.iter().enumerate() {
            let mag = c.unsigned_abs();
            *self.histogram.entry(mag).or_insert(0) += 1;
            if c == 0 {
                self.silent += 1;
            }
            let fired = train.channel(ch).iter().filter(|&&e| e != 0).count();
            let span = if train.scheme.is_bitwise() { train.timesteps } else { mag as usize };
            self.events += fired as u64;
            self.slots += padded_len(span, self.window) as u64;
        }
        self.channels += counts.counts.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &FiringAccumulator) -> Result<()> {
        if other.window != self.window {
            return Err(Error::invalid("cannot merge accumulators with different windows"));
        }
        for (&k, &v) in &other.histogram {
            *self.histogram.entry(k).or_insert(0) += v;
        }
        self.channels += other.channels;
        self.silent += other.silent;
        self.events += other.events;
        self.slots += other.slots;
        Ok(())
    }

    pub fn finish(&self) -> Result<FiringStats> {
        if self.channels == 0 {
            return Err(Error::EmptyInput);
        }
        let n = self.channels as f64;
        let frac_within = WITHIN_BOUNDS
            .iter()
            .map(|&hi| WithinRange {
                lo: 0,
                hi,
                fraction: self.histogram.range(..=hi).map(|(_, &v)| v).sum::<u64>() as f64 / n,
            })
            .collect();
        Ok(FiringStats {
            histogram: self.histogram.clone(),
            channels: self.channels,
            events: self.events,
            avg_spikes_per_channel: self.events as f64 / n,
            silent_fraction: self.silent as f64 / n,
            frac_within,
            window: self.window,
            windowed_sparsity: 1.0 - self.events as f64 / self.slots as f64,
        })
    }
}

/// Statistics for one count tensor. Without a train the counts are read as
/// ternary events.
pub fn firing_stats(counts: &SpikeCountTensor, train: Option<&SpikeTrain>, window: usize) -> Result<FiringStats> {
    let mut acc = FiringAccumulator::new(window)?;
    match train {
        Some(t) => acc.record_train(counts, t)?,
        None => acc.record(counts, Scheme::Ternary, None)?,
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub fp16_mac_pj: f64,
    pub int8_mac_pj: f64,
    pub int8_add_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { fp16_mac_pj: 1.5, int8_mac_pj: 0.23, int8_add_pj: 0.03 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub avg_spikes: f64,
    pub mac_energy_pj: f64,
    /// `None` when the network is silent and the ratio is unbounded.
    pub vs_fp16_ratio: Option<f64>,
    pub vs_int8_ratio: Option<f64>,
    pub infinite_ratios: bool,
}

pub fn energy_report(avg_spikes: f64, consts: &EnergyConstants) -> Result<EnergyReport> {
    if !(avg_spikes >= 0.0) || !avg_spikes.is_finite() {
        return Err(Error::invalid(alloc::format!("average spikes must be finite and non-negative, got {avg_spikes}")));
    }
    for c in [consts.fp16_mac_pj, consts.int8_mac_pj, consts.int8_add_pj] {
        if !(c > 0.0) {
            return Err(Error::invalid("energy constants must be positive"));
        }
    }
    let mac = avg_spikes * consts.int8_add_pj;
    let infinite = mac == 0.0;
    let ratio = |num: f64| (!infinite).then(|| num / mac);
    Ok(EnergyReport {
        avg_spikes,
        mac_energy_pj: mac,
        vs_fp16_ratio: ratio(consts.fp16_mac_pj),
        vs_int8_ratio: ratio(consts.int8_mac_pj),
        infinite_ratios: infinite,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RasterRow {
    pub time: u64,
    pub neuron: usize,
    pub value: i8,
}

/// Events of neurons `range` (indices into the last dimension) on a time
/// axis of `token * timesteps + step`, ordered by time then neuron.
///
/// With `presence_only` every event is reported as `1`.
pub fn raster_export(train: &SpikeTrain, range: Range<usize>, presence_only: bool) -> Result<Vec<RasterRow>> {
    let neurons = train.shape.last().copied().unwrap_or(1);
    if range.is_empty() || range.end > neurons {
        return Err(Error::invalid(alloc::format!(
            "neuron range {}..{} is empty or exceeds {neurons}",
            range.start,
            range.end
        )));
    }
    let tokens = train.channels().checked_div(neurons).unwrap_or(0);
    let steps = train.timesteps;
    let mut rows = Vec::new();
    for tok in 0..tokens {
        for t in 0..steps {
            for n in range.clone() {
                let e = train.events[(tok * neurons + n) * steps + t];
                if e != 0 {
                    rows.push(RasterRow {
                        time: (tok * steps + t) as u64,
                        neuron: n,
                        value: if presence_only { 1 } else { e },
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Rebuilds a train of the given layout from signed raster rows.
pub fn raster_to_train(
    rows: &[RasterRow],
    scheme: Scheme,
    timesteps: usize,
    bits: Option<u32>,
    shape: Vec<usize>,
) -> Result<SpikeTrain> {
    let neurons = shape.last().copied().unwrap_or(1);
    let channels: usize = shape.iter().product();
    let mut events = vec![0i8; channels * timesteps];
    for r in rows {
        if timesteps == 0 || r.neuron >= neurons {
            return Err(Error::invalid("raster row outside the train layout"));
        }
        let tok = (r.time / timesteps as u64) as usize;
        let t = (r.time % timesteps as u64) as usize;
        let ch = tok * neurons + r.neuron;
        if ch >= channels {
            return Err(Error::invalid("raster row outside the train layout"));
        }
        events[ch * timesteps + t] = r.value;
    }
    Ok(SpikeTrain { scheme, timesteps, bits, shape, events })
}
