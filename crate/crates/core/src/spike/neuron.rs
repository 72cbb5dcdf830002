use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reset {
    /// Membrane returns to `v_reset = 0` after a spike.
    Hard,
    /// The threshold is subtracted; the residual is kept.
    Soft,
}

/// Leaky integrate-and-fire parameters. `lambda = 1` is the IF neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    pub lambda: f32,
    pub v_th_fixed: f32,
    pub reset: Reset,
}

impl NeuronParams {
    pub fn integrate_and_fire(reset: Reset) -> Self {
        Self { lambda: 1.0, v_th_fixed: 1.0, reset }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(alloc::format!("decay {} not in (0, 1]", self.lambda)));
        }
        if !(self.v_th_fixed > 0.0) {
            return Err(Error::invalid("fixed threshold must be positive"));
        }
        Ok(())
    }
}

/// Runs the LIF membrane over `inputs` (one value per step) with threshold
/// `params.v_th_fixed` and returns the spike at every step.
pub fn lif_simulate(inputs: &[f32], params: &NeuronParams) -> Result<Vec<u8>> {
    params.validate()?;
    Ok(run(inputs.iter().map(|&x| x as f64), params.v_th_fixed as f64, params))
}

// f64 membrane: sums and differences of f32 inputs stay exact
fn run(inputs: impl Iterator<Item = f64>, v_th: f64, params: &NeuronParams) -> Vec<u8> {
    let lambda = params.lambda as f64;
    let mut v = 0.0f64;
    let mut prev_spike = 0u8;
    let mut spikes = Vec::new();
    for (t, x) in inputs.enumerate() {
        // v_{t+1} from v_t and s_t, then add the new input
        v = if t == 0 {
            x
        } else {
            let s = prev_spike as f64;
            match params.reset {
                Reset::Hard => lambda * (1.0 - s) * v + x,
                Reset::Soft => lambda * v - v_th * s + x,
            }
        };
        prev_spike = (v >= v_th) as u8;
        spikes.push(prev_spike);
    }
    spikes
}

/// Total spikes of a neuron driven by `x + v_th/2` at the first step and
/// silence afterwards, over `steps` steps.
///
/// With `lambda = 1`, soft reset and enough steps this equals
/// `round(x / v_th)` for `x >= 0`.
pub fn if_simulate(x: f32, v_th: f32, steps: usize, params: &NeuronParams) -> Result<u32> {
    if steps < 1 {
        return Err(Error::invalid("simulation needs at least one step"));
    }
    if !(v_th > 0.0) {
        return Err(Error::invalid("threshold must be positive"));
    }
    params.validate()?;
    let inputs = core::iter::once(x as f64 + v_th as f64 / 2.0).chain(core::iter::repeat(0.0)).take(steps);
    Ok(run(inputs, v_th as f64, params).iter().map(|&s| s as u32).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spike::round_half_away;

    #[test]
    fn five_spikes_for_five_thresholds() {
        let p = NeuronParams::integrate_and_fire(Reset::Soft);
        assert_eq!(if_simulate(5.0, 1.0, 10, &p).unwrap(), 5);
    }

    #[test]
    fn below_half_threshold_is_silent() {
        let p = NeuronParams::integrate_and_fire(Reset::Soft);
        assert_eq!(if_simulate(0.49, 1.0, 10, &p).unwrap(), 0);
        assert_eq!(if_simulate(0.0, 1.0, 10, &p).unwrap(), 0);
    }

    #[test]
    fn hard_reset_never_exceeds_soft_reset() {
        let soft = NeuronParams::integrate_and_fire(Reset::Soft);
        let hard = NeuronParams::integrate_and_fire(Reset::Hard);
        for i in 0..200 {
            let x = i as f32 * 0.137;
            let s = if_simulate(x, 1.0, 64, &soft).unwrap();
            let h = if_simulate(x, 1.0, 64, &hard).unwrap();
            assert!(h <= s, "x = {x}");
        }
    }

    #[test]
    fn soft_if_matches_rounding_on_grid() {
        let p = NeuronParams::integrate_and_fire(Reset::Soft);
        for &v_th in &[1.0f32, 0.5, 0.25, 2.0] {
            for i in 0..=10_000u32 {
                let x = i as f32 * (10.0 * v_th / 10_000.0);
                let sim = if_simulate(x, v_th, 16, &p).unwrap();
                assert_eq!(sim as f32, round_half_away(x / v_th), "x = {x}, v_th = {v_th}");
            }
        }
    }

    #[test]
    fn non_dyadic_thresholds_match_counts_on_grid() {
        let p = NeuronParams::integrate_and_fire(Reset::Soft);
        for &v_th in &[0.8f32, 1.7, 0.3, 0.37] {
            let xs: Vec<f32> = (0..=10_000u32).map(|i| v_th * (i as f32 * 10.0 / 10_000.0)).collect();
            let th = crate::Tensor::new(alloc::vec![1], alloc::vec![v_th]).unwrap();
            let c = crate::spike::encode_counts(&crate::Tensor::new(alloc::vec![xs.len()], xs.clone()).unwrap(), &th)
                .unwrap();
            for (x, &count) in xs.iter().zip(&c.counts) {
                let sim = if_simulate(*x, v_th, 16, &p).unwrap();
                assert_eq!(sim as i32, count, "x = {x}, v_th = {v_th}");
            }
        }
    }

    #[test]
    fn leaky_neuron_spikes_less() {
        let leaky = NeuronParams { lambda: 0.5, v_th_fixed: 1.0, reset: Reset::Soft };
        let plain = NeuronParams { lambda: 1.0, ..leaky };
        let drive = [0.6f32; 20];
        let a: u32 = lif_simulate(&drive, &leaky).unwrap().iter().map(|&s| s as u32).sum();
        let b: u32 = lif_simulate(&drive, &plain).unwrap().iter().map(|&s| s as u32).sum();
        assert!(a < b);
    }

    #[test]
    fn invalid_parameters() {
        let p = NeuronParams::integrate_and_fire(Reset::Soft);
        assert!(if_simulate(1.0, 1.0, 0, &p).is_err());
        let bad = NeuronParams { lambda: 1.5, ..p };
        assert!(if_simulate(1.0, 1.0, 4, &bad).is_err());
    }
}
