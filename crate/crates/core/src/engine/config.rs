use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default unbounded PGD step in internal `[-1, 1]` units.
pub const DEFAULT_PGD_STEP: f64 = 2.0 / 255.0;
/// Default step for the gradient-descent updates (GD and C&W).
pub const DEFAULT_GD_STEP: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Pgd,
    Gd,
    Cw,
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(Self::Pgd),
            "gd" => Ok(Self::Gd),
            "cw" => Ok(Self::Cw),
            other => Err(Error::config(format!("unknown attack method `{other}` (pgd, gd, cw)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceNorm {
    L1,
    L2,
}

impl std::str::FromStr for DistanceNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::config(format!("unknown distance `{other}` (l1, l2)"))),
        }
    }
}

/// Which image the distance regulariser compares against the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceAnchor {
    /// The optimisation variable itself.
    Iterate,
    /// The filtered iterate.
    Filtered,
}

impl std::str::FromStr for DistanceAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterate" => Ok(Self::Iterate),
            "filtered" => Ok(Self::Filtered),
            other => Err(Error::config(format!("unknown distance anchor `{other}` (iterate, filtered)"))),
        }
    }
}

/// Settings of the pre-explanation attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Iterations requested. C&W runs twice this many.
    pub num_iterations: usize,
    /// Update step; `None` picks the method's default.
    pub step_size: Option<f64>,
    pub lambda_d: f64,
    pub distance_norm: DistanceNorm,
    pub distance_anchor: DistanceAnchor,
    /// Filter depth in respaced steps.
    pub tau: usize,
    /// Number of respaced steps the base chain is evaluated on.
    pub respacing: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pgd,
            num_iterations: 50,
            step_size: None,
            lambda_d: 0.001,
            distance_norm: DistanceNorm::L1,
            distance_anchor: DistanceAnchor::Iterate,
            tau: 5,
            respacing: 50,
        }
    }
}

impl AttackConfig {
    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(match self.method {
            AttackMethod::Pgd => DEFAULT_PGD_STEP,
            AttackMethod::Gd | AttackMethod::Cw => DEFAULT_GD_STEP,
        })
    }

    pub fn effective_iterations(&self) -> usize {
        match self.method {
            AttackMethod::Cw => 2 * self.num_iterations,
            _ => self.num_iterations,
        }
    }

    pub fn validate(&self, problems: &mut Vec<String>) {
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                problems.push(format!("attack.step_size must be positive, got {a}"));
            }
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            problems.push(format!("attack.lambda_d must be nonnegative, got {}", self.lambda_d));
        }
        if self.respacing == 0 {
            problems.push("attack.respacing must be positive".into());
        }
        if self.tau > self.respacing {
            problems.push(format!("attack.tau {} exceeds attack.respacing {}", self.tau, self.respacing));
        }
    }
}

/// Settings of the mask construction and masked refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Side of the square dilation window (odd).
    pub dilation: usize,
    pub threshold: f64,
    /// Refinement depth; `None` reuses the attack's `tau`.
    pub tau: Option<usize>,
    /// Refinement respacing; `None` reuses the attack's.
    pub respacing: Option<usize>,
    /// When false the whole image is re-denoised (an all-ones mask).
    pub use_mask: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { dilation: 15, threshold: 0.15, tau: None, respacing: None, use_mask: true }
    }
}

impl RefineConfig {
    pub fn validate(&self, attack: &AttackConfig, problems: &mut Vec<String>) {
        if self.dilation == 0 || self.dilation % 2 == 0 {
            problems.push(format!("refine.dilation must be a positive odd integer, got {}", self.dilation));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            problems.push(format!("refine.threshold must lie in [0, 1], got {}", self.threshold));
        }
        let respacing = self.respacing.unwrap_or(attack.respacing);
        if respacing == 0 {
            problems.push("refine.respacing must be positive".into());
        }
        let tau = self.tau.unwrap_or(attack.tau);
        if tau > respacing {
            problems.push(format!("refine.tau {tau} exceeds refine.respacing {respacing}"));
        }
    }
}

/// Settings of the multiple-explanation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    /// Candidate refinement respacings; each run draws one from its seed.
    pub respacings: Vec<usize>,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self { respacings: vec![50, 60, 80, 100] }
    }
}

impl DiversityConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.respacings.is_empty() || self.respacings.contains(&0) {
            problems.push("diversity.respacings must be a non-empty list of positive step counts".into());
        }
    }
}

/// Everything that parameterises one explanation, besides its seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub attack: AttackConfig,
    pub refine: RefineConfig,
    pub diversity: DiversityConfig,
}

impl ExplainConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        self.attack.validate(&mut problems);
        self.refine.validate(&self.attack, &mut problems);
        self.diversity.validate(&mut problems);
        problems
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Checks the respacings against a base chain of `num_steps` steps.
    pub fn validate_for_chain(&self, num_steps: usize) -> Result<()> {
        self.validate()?;
        let refine = self.refine.respacing.unwrap_or(self.attack.respacing);
        for (what, n) in [("attack.respacing", self.attack.respacing), ("refine.respacing", refine)] {
            if n > num_steps {
                return Err(Error::config(format!("{what} {n} exceeds the {num_steps}-step chain")));
            }
        }
        Ok(())
    }

    pub fn refine_tau(&self) -> usize {
        self.refine.tau.unwrap_or(self.attack.tau)
    }

    pub fn refine_respacing(&self) -> usize {
        self.refine.respacing.unwrap_or(self.attack.respacing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_problems_are_listed_together() {
        assert!(ExplainConfig::default().problems().is_empty());
        let mut bad = ExplainConfig::default();
        bad.attack.step_size = Some(0.0);
        bad.refine.dilation = 4;
        bad.refine.threshold = 2.0;
        assert_eq!(bad.problems().len(), 3);
    }

    #[test]
    fn cw_doubles_iterations() {
        let cfg = AttackConfig { method: AttackMethod::Cw, num_iterations: 7, ..Default::default() };
        assert_eq!(cfg.effective_iterations(), 14);
    }

    #[test]
    fn unknown_names_are_configuration_errors() {
        assert!(matches!("fgsm".parse::<AttackMethod>(), Err(Error::Config(_))));
        assert!(matches!("linf".parse::<DistanceNorm>(), Err(Error::Config(_))));
    }
}
