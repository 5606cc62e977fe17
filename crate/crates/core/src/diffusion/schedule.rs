use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Family of beta schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas spaced linearly from 1e-4 to 0.02.
    #[default]
    Linear,
    /// Squared-cosine signal retention with offset 0.008.
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!(
                "unsupported schedule family `{other}` (expected `linear` or `cosine`)"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

/// A sequence of diffusion levels the reverse chain can walk through.
///
/// Steps are numbered `1..=len()`; step 0 stands for the clean image.
pub trait Timesteps: Send + Sync {
    fn len(&self) -> usize;

    /// Cumulative signal retention at `step`, with `alpha_bar(0) == 1`.
    fn alpha_bar(&self, step: usize) -> f64;

    /// Timestep of the underlying chain that a network is conditioned on.
    fn model_timestep(&self, step: usize) -> usize;

    /// Per-step beta implied by consecutive retention values.
    fn beta(&self, step: usize) -> f64 {
        1.0 - self.alpha_bar(step) / self.alpha_bar(step - 1)
    }

    /// Variance of the Gaussian posterior `q(x_{step-1} | x_step, x_0)`.
    fn posterior_variance(&self, step: usize) -> f64 {
        let ab = self.alpha_bar(step);
        let ab_prev = self.alpha_bar(step - 1);
        if ab >= 1.0 {
            return 0.0;
        }
        self.beta(step) * (1.0 - ab_prev) / (1.0 - ab)
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Diffusion constants over `T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(num_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::validation("a schedule needs at least one step"));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                let (start, end) = (1e-4, 0.02);
                if num_steps == 1 {
                    vec![start]
                } else {
                    (0..num_steps)
                        .map(|i| start + (end - start) * i as f64 / (num_steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| (((t / num_steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=num_steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::validation("a schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::validation(format!("beta_{} = {b} lies outside (0, 1)", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Uniform subsequence of `steps` levels ending at the last one.
    pub fn respace(&self, steps: usize) -> Result<RespacedSchedule> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::validation(format!(
                "cannot respace a {total}-step schedule to {steps} steps"
            )));
        }
        let kept: Vec<usize> = (1..=steps).map(|i| i * total / steps).collect();
        let alpha_bars = kept.iter().map(|&k| self.alpha_bars[k - 1]).collect();
        Ok(RespacedSchedule { base: self.clone(), kept, alpha_bars })
    }
}

impl Timesteps for NoiseSchedule {
    fn len(&self) -> usize {
        self.betas.len()
    }

    fn alpha_bar(&self, step: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.alpha_bars[step - 1]
        }
    }

    fn model_timestep(&self, step: usize) -> usize {
        step
    }

    fn beta(&self, step: usize) -> f64 {
        self.betas[step - 1]
    }
}

/// Builds a schedule from a family name.
pub fn build_schedule(num_steps: usize, kind: &str) -> Result<NoiseSchedule> {
    NoiseSchedule::build(num_steps, kind.parse()?)
}

/// A schedule evaluated on a uniform subsequence of its base steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    kept: Vec<usize>,
    alpha_bars: Vec<f64>,
}

impl RespacedSchedule {
    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    /// Base-chain indices of the retained steps, strictly increasing.
    pub fn kept_steps(&self) -> &[usize] {
        &self.kept
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

impl Timesteps for RespacedSchedule {
    fn len(&self) -> usize {
        self.kept.len()
    }

    fn alpha_bar(&self, step: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.alpha_bars[step - 1]
        }
    }

    fn model_timestep(&self, step: usize) -> usize {
        self.kept[step - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Product of `(1 - beta)` accumulated independently of the schedule code.
    fn oracle_alpha_bar(betas: &[f64], t: usize) -> f64 {
        betas[..t].iter().fold(1.0, |acc, b| acc * (1.0 - b))
    }

    #[test]
    fn linear_thousand_steps_ends_near_pure_noise() {
        let s = NoiseSchedule::build(1000, ScheduleKind::Linear).unwrap();
        // Independent evaluation of the linear betas.
        let betas: Vec<f64> = (0..1000).map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0).collect();
        let expected = oracle_alpha_bar(&betas, 1000);
        assert!(expected <= 0.01);
        assert!((s.alpha_bar(1000) - expected).abs() <= 1e-12);
        assert!(s.alpha_bar(1) >= 0.99);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::build(1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.betas()[0]);
    }

    #[test]
    fn empty_schedule_is_rejected() {
        assert!(matches!(NoiseSchedule::build(0, ScheduleKind::Linear), Err(Error::Validation(_))));
        assert!(matches!(build_schedule(10, "sigmoid"), Err(Error::Config(_))));
    }

    #[test]
    fn five_hundred_steps_still_reach_noise() {
        let s = NoiseSchedule::build(500, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bar(500) <= 0.01);
    }

    #[test]
    fn cosine_schedule_satisfies_invariants() {
        let s = build_schedule(1000, "cosine").unwrap();
        assert!(s.alpha_bar(1) >= 0.99);
        assert!(s.alpha_bar(1000) <= 0.01);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] <= w[0] && w[1] > 0.0));
    }

    #[test]
    fn respacing_fifty_of_a_thousand() {
        let r = NoiseSchedule::build(1000, ScheduleKind::Linear).unwrap().respace(50).unwrap();
        assert_eq!(r.len(), 50);
        assert_eq!(r.kept_steps()[0], 20);
        assert_eq!(*r.kept_steps().last().unwrap(), 1000);
    }

    #[test]
    fn respacing_enumerates_uniform_stride() {
        let r = NoiseSchedule::build(100, ScheduleKind::Linear).unwrap().respace(4).unwrap();
        assert_eq!(r.kept_steps(), &[25, 50, 75, 100]);
    }

    #[test]
    fn identity_respacing() {
        let s = NoiseSchedule::build(30, ScheduleKind::Linear).unwrap();
        let r = s.respace(30).unwrap();
        assert_eq!(r.kept_steps(), (1..=30).collect::<Vec<_>>().as_slice());
        for t in 1..=30 {
            assert_eq!(r.beta(t), 1.0 - s.alpha_bar(t) / s.alpha_bar(t - 1));
        }
        assert!(s.respace(31).is_err());
        assert!(s.respace(0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_consistent(t in 1usize..400, kind in prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Cosine)]) {
            let s = NoiseSchedule::build(t, kind).unwrap();
            for step in 1..=t {
                let oracle = oracle_alpha_bar(s.betas(), step);
                prop_assert!((s.alpha_bar(step) - oracle).abs() <= 1e-6 * oracle);
                prop_assert!(s.alpha_bar(step) > 0.0);
                prop_assert!(s.alpha_bar(step) <= s.alpha_bar(step - 1));
            }
        }

        #[test]
        fn respaced_values_match_base_exactly(total in 1usize..300, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::build(total, ScheduleKind::Linear).unwrap();
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let r = s.respace(steps).unwrap();
            prop_assert_eq!(r.len(), steps);
            prop_assert!(r.kept_steps()[0] >= 1);
            prop_assert_eq!(*r.kept_steps().last().unwrap(), total);
            prop_assert!(r.kept_steps().windows(2).all(|w| w[0] < w[1]));
            for (i, &k) in r.kept_steps().iter().enumerate() {
                prop_assert_eq!(r.alpha_bar(i + 1), s.alpha_bar(k));
            }
        }
    }
}
