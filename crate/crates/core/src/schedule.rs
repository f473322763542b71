//! Diffusion noise schedule and the subsampled DDIM timestep plan.
//!
//! `alpha_bar(t)` is the cumulative signal coefficient `prod_{s<=t} (1 - beta_s)`
//! with `alpha_bar(0) = 1`, so the last sampling step lands on a noiseless
//! state. The training schedule is a linear beta ramp; nothing in the
//! engine depends on that choice beyond `alpha_bar` being strictly
//! decreasing.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
    /// `betas[t - 1]` is beta at timestep `t`.
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`.
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `total_steps`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(StsError::invalid("total_steps must be positive"));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(StsError::invalid(format!(
                "betas must lie in (0, 1), got {beta_start} and {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(StsError::invalid("beta_start must not exceed beta_end"));
        }
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(total_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            total_steps,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    /// Beta at timestep `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.total_steps, "timestep {t} out of range");
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal coefficient at timestep `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Evenly strided inference plan ending at `T`.
    pub fn plan(&self, num_inference_steps: usize) -> Result<TimestepPlan> {
        TimestepPlan::uniform(self.total_steps, num_inference_steps)
    }
}

/// Strictly increasing timesteps in `[1, T]` whose last entry is `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    /// Stride `floor(T / S)`, anchored so that the last entry is `T`.
    pub fn uniform(total_steps: usize, num_inference_steps: usize) -> Result<Self> {
        if num_inference_steps == 0 {
            return Err(StsError::invalid("num_inference_steps must be positive"));
        }
        if num_inference_steps > total_steps {
            return Err(StsError::invalid(format!(
                "num_inference_steps ({num_inference_steps}) exceeds total_steps ({total_steps})"
            )));
        }
        let stride = total_steps / num_inference_steps;
        let steps = (0..num_inference_steps)
            .map(|i| total_steps - (num_inference_steps - 1 - i) * stride)
            .collect();
        Ok(Self { steps })
    }

    /// Builds a plan from explicit timesteps, validating the invariants.
    pub fn from_steps(steps: Vec<usize>, total_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(StsError::invalid("plan must not be empty"));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StsError::invalid("plan must be strictly increasing and start at >= 1"));
        }
        if *steps.last().expect("non-empty") != total_steps {
            return Err(StsError::invalid("plan must end at total_steps"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.steps.last().expect("plan is never empty")
    }

    /// `(t, t_prev)` pairs in sampling order; `t_prev = 0` below the first entry.
    pub fn sampling_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps.len())
            .rev()
            .map(move |i| (self.steps[i], if i == 0 { 0 } else { self.steps[i - 1] }))
    }

    /// `(t, t_next)` pairs in inversion order, starting from `t = 0`.
    pub fn inversion_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps.len()).map(move |i| (if i == 0 { 0 } else { self.steps[i - 1] }, self.steps[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn first_alpha_bar_of_default_ramp() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn two_step_hand_computed() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.3).unwrap();
        let ab = s.alpha_bars();
        assert_eq!(ab[0], 1.0);
        assert!((ab[1] - 0.9).abs() < 1e-15);
        assert!((ab[2] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn plan_examples() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.plan(1).unwrap().steps(), &[1000]);
        let p = s.plan(20).unwrap();
        let expected: Vec<usize> = (1..=20).map(|k| 50 * k).collect();
        assert_eq!(p.steps(), expected.as_slice());
        let s4 = DiffusionSchedule::linear(4, 0.1, 0.2).unwrap();
        assert_eq!(s4.plan(4).unwrap().steps(), &[1, 2, 3, 4]);
        assert!(s4.plan(5).is_err());
        assert!(s4.plan(0).is_err());
    }

    #[test]
    fn step_pairs_cover_the_plan() {
        let p = TimestepPlan::uniform(10, 3).unwrap();
        assert_eq!(p.steps(), &[4, 7, 10]);
        let samp: Vec<_> = p.sampling_pairs().collect();
        assert_eq!(samp, vec![(10, 7), (7, 4), (4, 0)]);
        let inv: Vec<_> = p.inversion_pairs().collect();
        assert_eq!(inv, vec![(0, 4), (4, 7), (7, 10)]);
    }

    proptest! {
        #[test]
        fn alpha_bars_decrease_and_round_trip(
            t in 1usize..400,
            a in 1e-5f64..0.5,
            span in 0.0f64..0.4,
        ) {
            let b = (a + span).min(0.99);
            let s = DiffusionSchedule::linear(t, a, b).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            for i in 1..=t {
                prop_assert!(ab[i] < ab[i - 1] && ab[i] > 0.0);
                prop_assert!((ab[i] / ab[i - 1] - (1.0 - s.beta(i))).abs() < 1e-12);
                let recovered = 1.0 - ab[i] / ab[i - 1];
                prop_assert!((recovered - s.beta(i)).abs() < 1e-10);
            }
        }

        #[test]
        fn plans_are_valid(t in 1usize..2000, frac in 0.0f64..1.0) {
            let s = ((t as f64 * frac) as usize).clamp(1, t);
            let p = TimestepPlan::uniform(t, s).unwrap();
            prop_assert_eq!(p.len(), s);
            prop_assert_eq!(p.last(), t);
            prop_assert!(p.steps()[0] >= 1);
            prop_assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
            if s == t {
                prop_assert_eq!(p.steps().to_vec(), (1..=t).collect::<Vec<_>>());
            }
        }
    }
}
