use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::AttentionInputs;
use crate::math::{dot, softmax_in_place};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Softmax,
    Windowed,
    Linear,
}

/// Explicit `[heads, seq, seq]` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub a: Tensor,
    pub kind: MapKind,
}

impl AttentionMap {
    /// `map · V` for each head, `[heads, seq, d_v]`.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        let (heads, n, _) = self.a.dims3()?;
        let (hv, nv, d_v) = v.dims3()?;
        if hv != heads || nv != n {
            return Err(Error::shape("value tensor does not match attention map"));
        }
        let mut out = Tensor::zeros(&[heads, n, d_v]);
        for h in 0..heads {
            let a = AttentionInputs::head(&self.a, h);
            let vh = AttentionInputs::head(v, h);
            let o = &mut out.data_mut()[h * n * d_v..(h + 1) * n * d_v];
            for t in 0..n {
                for s in 0..n {
                    let w = a[t * n + s];
                    if w != 0.0 {
                        crate::math::axpy(w, &vh[s * d_v..(s + 1) * d_v], &mut o[t * d_v..(t + 1) * d_v]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Builds the causal attention map for `kind`. `w` is the window and is
/// required exactly when `kind` is [`MapKind::Windowed`].
pub fn attention_map(inp: &AttentionInputs, kind: MapKind, w: Option<usize>) -> Result<AttentionMap> {
    let window = match (kind, w) {
        (MapKind::Windowed, None) => return Err(Error::invalid("windowed attention map needs a window size")),
        (MapKind::Windowed, Some(0)) => return Err(Error::InvalidWindow),
        (MapKind::Windowed, Some(w)) => w,
        (_, Some(_)) => return Err(Error::invalid("window size only applies to windowed maps")),
        (_, None) => usize::MAX,
    };
    let (heads, n, d_k) = (inp.heads(), inp.seq(), inp.d_k());
    let mut a = Tensor::zeros(&[heads, n, n]);
    let mut row = Vec::with_capacity(n);
    for h in 0..heads {
        let q = AttentionInputs::head(&inp.q, h);
        let k = AttentionInputs::head(&inp.k, h);
        let ah = &mut a.data_mut()[h * n * n..(h + 1) * n * n];
        for t in 0..n {
            let lo = (t + 1).saturating_sub(window);
            row.clear();
            row.extend((lo..=t).map(|s| dot(&q[t * d_k..(t + 1) * d_k], &k[s * d_k..(s + 1) * d_k])));
            if kind != MapKind::Linear {
                softmax_in_place(&mut row);
            }
            ah[t * n + lo..t * n + t + 1].copy_from_slice(&row);
        }
    }
    Ok(AttentionMap { a, kind })
}

#[cfg(test)]
mod tests {
    extern crate std;

    use super::*;
    use crate::attention::{linear_attention_parallel, softmax_attention, swa};
    use crate::math::{rel_err, ParamRng};

    fn inputs(seed: u64, n: usize, d: usize) -> AttentionInputs {
        let mut rng = ParamRng::new(seed);
        AttentionInputs::new(rng.tensor(&[2, n, d], 1.0), rng.tensor(&[2, n, d], 1.0), rng.tensor(&[2, n, d], 1.0))
            .unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_causal() {
        let inp = inputs(1, 10, 4);
        let m = attention_map(&inp, MapKind::Softmax, None).unwrap();
        for h in 0..2 {
            for t in 0..10 {
                let row = &m.a.data()[h * 100 + t * 10..h * 100 + t * 10 + 10];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row[t + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn covering_window_equals_softmax_map() {
        let inp = inputs(2, 8, 4);
        let full = attention_map(&inp, MapKind::Softmax, None).unwrap();
        let win = attention_map(&inp, MapKind::Windowed, Some(8)).unwrap();
        assert_eq!(full.a, win.a);
    }

    #[test]
    fn maps_reproduce_kernel_outputs() {
        let inp = inputs(3, 12, 4);
        let cases = [
            (MapKind::Softmax, None, softmax_attention(&inp, 0).unwrap()),
            (MapKind::Windowed, Some(3), swa(&inp, 3).unwrap()),
            (MapKind::Linear, None, linear_attention_parallel(&inp).unwrap()),
        ];
        for (kind, w, expect) in cases {
            let m = attention_map(&inp, kind, w).unwrap();
            let o = m.apply(&inp.v).unwrap();
            assert!(rel_err(o.data(), expect.data()) < 1e-5, "{kind:?}");
        }
    }

    #[test]
    fn window_argument_validation() {
        let inp = inputs(4, 4, 2);
        assert!(attention_map(&inp, MapKind::Windowed, None).is_err());
        assert!(attention_map(&inp, MapKind::Softmax, Some(2)).is_err());
        assert_eq!(attention_map(&inp, MapKind::Windowed, Some(0)), Err(Error::InvalidWindow));
    }
}
