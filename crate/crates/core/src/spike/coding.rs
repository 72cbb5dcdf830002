use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SpikeCountTensor;
use crate::{Error, Result};

/// How an integer count is spread over virtual time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `c` unit spikes, `c >= 0`.
    Binary,
    /// `|c|` spikes of sign `c`.
    Ternary,
    /// Unsigned binary digits, least significant first.
    BitwisePure,
    /// Non-adjacent signed-digit form: digits in {-1, 0, 1} at weights `2^j`.
    BitwiseBidir,
    /// Two's complement digits; the top step carries weight `-2^(bits-1)`.
    BitwiseTwos,
}

impl Scheme {
    pub const ALL: [Scheme; 5] =
        [Scheme::Binary, Scheme::Ternary, Scheme::BitwisePure, Scheme::BitwiseBidir, Scheme::BitwiseTwos];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Binary => "binary",
            Scheme::Ternary => "ternary",
            Scheme::BitwisePure => "bitwise_pure",
            Scheme::BitwiseBidir => "bitwise_bidir",
            Scheme::BitwiseTwos => "bitwise_twos",
        }
    }

    pub fn is_bitwise(self) -> bool {
        matches!(self, Scheme::BitwisePure | Scheme::BitwiseBidir | Scheme::BitwiseTwos)
    }

    fn allows_negative_events(self) -> bool {
        matches!(self, Scheme::Ternary | Scheme::BitwiseBidir)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown coding scheme `{s}`")))
    }
}

/// Time-expanded spike events, `events[channel * timesteps + t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub scheme: Scheme,
    pub timesteps: usize,
    /// Digit count for bitwise schemes.
    pub bits: Option<u32>,
    /// Shape of the originating count tensor.
    pub shape: Vec<usize>,
    pub events: Vec<i8>,
}

impl SpikeTrain {
    pub fn channels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[i8] {
        &self.events[c * self.timesteps..(c + 1) * self.timesteps]
    }

    /// Number of nonzero events.
    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|&&e| e != 0).count()
    }

    /// Positional weight of step `t`.
    pub fn step_weight(&self, t: usize) -> i64 {
        match self.scheme {
            Scheme::Binary | Scheme::Ternary => 1,
            Scheme::BitwisePure | Scheme::BitwiseBidir => 1i64 << t,
            Scheme::BitwiseTwos => {
                let bits = self.bits.unwrap_or(self.timesteps as u32) as usize;
                if t + 1 == bits {
                    -(1i64 << t)
                } else {
                    1i64 << t
                }
            }
        }
    }
}

/// Non-adjacent form of `c`, least significant digit first.
pub fn naf_digits(c: i64) -> Vec<i8> {
    let mut n = c;
    let mut digits = Vec::new();
    while n != 0 {
        let d = if n & 1 == 1 { 2 - n.rem_euclid(4) } else { 0 };
        digits.push(d as i8);
        n = (n - d) / 2;
    }
    digits
}

/// Smallest step count that can represent every count in `counts`.
pub fn min_bits(scheme: Scheme, counts: &[i32]) -> u32 {
    let width = |c: i32| -> u32 {
        match scheme {
            Scheme::BitwisePure => 32 - c.unsigned_abs().leading_zeros(),
            Scheme::BitwiseBidir => naf_digits(c as i64).len() as u32,
            Scheme::BitwiseTwos => {
                if c >= 0 {
                    33 - (c as u32).leading_zeros()
                } else {
                    33 - (!c as u32).leading_zeros()
                }
            }
            Scheme::Binary | Scheme::Ternary => c.unsigned_abs(),
        }
    };
    counts.iter().map(|&c| width(c)).max().unwrap_or(0).max(1)
}

fn check_fits(scheme: Scheme, c: i32, bits: u32) -> Result<()> {
    let overflow = Err(Error::BitOverflow { count: c, bits });
    let c64 = c as i64;
    match scheme {
        Scheme::BitwisePure => {
            if c < 0 {
                return Err(Error::invalid(alloc::format!("negative count {c} under bitwise_pure")));
            }
            if c64 >= 1i64 << bits {
                return overflow;
            }
        }
        Scheme::BitwiseTwos => {
            let half = 1i64 << (bits - 1);
            if c64 < -half || c64 >= half {
                return overflow;
            }
        }
        Scheme::BitwiseBidir => {
            if naf_digits(c64).len() > bits as usize {
                return overflow;
            }
        }
        Scheme::Binary | Scheme::Ternary => {}
    }
    Ok(())
}

/// Expands counts into a spike train.
///
/// `bits` applies to the bitwise schemes; `None` picks the smallest width
/// that fits every count.
pub fn expand(counts: &SpikeCountTensor, scheme: Scheme, bits: Option<u32>) -> Result<SpikeTrain> {
    let cs = &counts.counts;
    let (timesteps, bits) = match scheme {
        Scheme::Binary => {
            if let Some(&neg) = cs.iter().find(|&&c| c < 0) {
                return Err(Error::NegativeBinary(neg));
            }
            (counts.max_abs() as usize, None)
        }
        Scheme::Ternary => (counts.max_abs() as usize, None),
        _ => {
            let b = bits.unwrap_or_else(|| min_bits(scheme, cs));
            if b == 0 || b > 32 {
                return Err(Error::invalid(alloc::format!("bit width {b} not in 1..=32")));
            }
            for &c in cs {
                check_fits(scheme, c, b)?;
            }
            (b as usize, Some(b))
        }
    };
    let mut events = vec![0i8; cs.len() * timesteps];
    for (ch, &c) in cs.iter().enumerate() {
        let slot = &mut events[ch * timesteps..(ch + 1) * timesteps];
        match scheme {
            Scheme::Binary | Scheme::Ternary => {
                let sign = c.signum() as i8;
                slot[..c.unsigned_abs() as usize].fill(sign);
            }
            Scheme::BitwisePure | Scheme::BitwiseTwos => {
                // two's complement bit pattern truncated to `timesteps` digits
                let pattern = c as u32;
                for (t, e) in slot.iter_mut().enumerate() {
                    *e = ((pattern >> t) & 1) as i8;
                }
            }
            Scheme::BitwiseBidir => {
                for (t, d) in naf_digits(c as i64).into_iter().enumerate() {
                    slot[t] = d;
                }
            }
        }
    }
    Ok(SpikeTrain { scheme, timesteps, bits, shape: counts.shape.clone(), events })
}

/// Sums each channel's events with their positional weights.
pub fn collapse(train: &SpikeTrain) -> Result<Vec<i32>> {
    let channels = train.channels();
    if train.events.len() != channels * train.timesteps {
        return Err(Error::shape("event buffer does not match channels × timesteps"));
    }
    if train.scheme.is_bitwise() && train.bits.is_some_and(|b| b as usize != train.timesteps) {
        return Err(Error::shape("bit width does not match timesteps"));
    }
    let weights: Vec<i64> = (0..train.timesteps).map(|t| train.step_weight(t)).collect();
    (0..channels)
        .map(|ch| {
            let mut acc = 0i64;
            for (&e, &w) in train.channel(ch).iter().zip(&weights) {
                let valid = match e {
                    0 | 1 => true,
                    -1 => train.scheme.allows_negative_events(),
                    _ => false,
                };
                if !valid {
                    return Err(Error::MalformedEvent { value: e, scheme: train.scheme.name() });
                }
                acc += e as i64 * w;
            }
            i32::try_from(acc).map_err(|_| Error::IntegerOverflow)
        })
        .collect()
}
