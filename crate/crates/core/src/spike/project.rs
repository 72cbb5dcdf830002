use alloc::vec;

use super::{SpikeCountTensor, SpikeTrain};
use crate::{Error, Result, Tensor};

fn check(w: &Tensor, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (d_out, d_in) = w.dims2()?;
    let row_len = shape.last().copied().unwrap_or(1);
    if row_len != d_in {
        return Err(Error::shape(alloc::format!("weight [{d_out}, {d_in}] cannot project rows of width {row_len}")));
    }
    let rows = shape.iter().product::<usize>() / d_in.max(1);
    Ok((d_out, d_in, rows))
}

/// `y = v_th ⊙ (W · counts)` for `W [out, in]` and counts `[rows, in]`,
/// using one integer-valued matmul per row. Accumulates in `f64`.
pub fn spike_project(w: &Tensor, counts: &SpikeCountTensor) -> Result<Tensor> {
    let (d_out, d_in, rows) = check(w, &counts.shape)?;
    let mut out = Tensor::zeros(&[rows, d_out]);
    for r in 0..rows {
        let c = &counts.counts[r * d_in..(r + 1) * d_in];
        let th = counts.row_threshold(r);
        for (o, wrow) in out.row_mut(r).iter_mut().zip(w.data().chunks_exact(d_in)) {
            let mut acc = 0.0f64;
            for (&wi, &ci) in wrow.iter().zip(c) {
                acc += wi as f64 * ci as f64;
            }
            *o = th * acc as f32;
        }
    }
    Ok(out)
}

/// Event-driven form of [`spike_project`]: for every step `t` and every
/// nonzero event `s_t[i]`, column `i` of `W` is added (or subtracted) with
/// the step's positional weight. Only spike positions touch the weights.
pub fn spike_project_events(w: &Tensor, train: &SpikeTrain, v_th: &[f32]) -> Result<Tensor> {
    let (d_out, d_in, rows) = check(w, &train.shape)?;
    if v_th.len() != 1 && v_th.len() != rows {
        return Err(Error::shape("threshold count does not match rows"));
    }
    let mut out = Tensor::zeros(&[rows, d_out]);
    let mut acc = vec![0.0f64; d_out];
    for r in 0..rows {
        acc.fill(0.0);
        for t in 0..train.timesteps {
            let weight = train.step_weight(t) as f64;
            for i in 0..d_in {
                let e = train.events[(r * d_in + i) * train.timesteps + t];
                if e == 0 {
                    continue;
                }
                let scale = e as f64 * weight;
                for (o, a) in acc.iter_mut().enumerate() {
                    *a += scale * w.data()[o * d_in + i] as f64;
                }
            }
        }
        let th = if v_th.len() == 1 { v_th[0] } else { v_th[r] };
        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = th * *a as f32;
        }
    }
    Ok(out)
}
