//! The two-stage explanation pipeline: adversarial pre-explanation through
//! the diffusion filter, then mask construction and masked refinement.

mod attack;
mod config;
mod diversity;
mod explain;
mod mask;
mod objective;
mod repaint;
pub mod run_dir;

pub use attack::{attack_step, generate_pre_explanations, AttackProgress, AttackTargets, PreExplanation};
pub use config::{
    AttackConfig, AttackMethod, DistanceAnchor, DistanceNorm, DiversityConfig, ExplainConfig, RefineConfig,
    DEFAULT_GD_STEP, DEFAULT_PGD_STEP,
};
pub use diversity::{diverse_explanations, diversity_run_config, respacing_for_seed, scaled_tau};
pub use explain::{CounterfactualResult, Explainer, Request, Timing};
pub use mask::{compute_mask, dilate, Mask};
pub use objective::{classification_objective, distance, margin_objective, Evaluation, Objective};
pub use repaint::repaint_refine;
