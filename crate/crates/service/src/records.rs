use std::collections::BTreeMap;

use ace_core::engine::{AttackProgress, CounterfactualResult, ExplainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
    Rejected,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Succeeded | Self::Failed | Self::Rejected)
    }

    /// Whether a record may move from `self` to `next`.
    pub fn can_become(self, next: RunStatus) -> bool {
        use RunStatus::*;
        matches!((self, next), (Queued, Running) | (Queued, Rejected) | (Queued, Failed) | (Running, Succeeded) | (Running, Failed))
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

fn default_split() -> String {
    "test".into()
}

/// A request to explain one dataset instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    #[serde(default, skip_serializing)]
    pub schema_version: Option<u32>,
    pub classifier: String,
    pub denoiser: String,
    pub dataset: String,
    #[serde(default = "default_split")]
    pub split: String,
    pub index: usize,
    pub target: usize,
    #[serde(default)]
    pub seed: u64,
    /// Partial explanation settings applied over the service defaults.
    #[serde(default)]
    pub config: Value,
    /// Derive the refinement settings from the seed as the diversity
    /// protocol does.
    #[serde(default)]
    pub diversity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: usize,
    pub total: usize,
    pub objective: f64,
}

impl From<&AttackProgress> for Progress {
    fn from(p: &AttackProgress) -> Self {
        Self { iteration: p.iteration, total: p.total, objective: p.objective.first().copied().unwrap_or(f64::NAN) }
    }
}

/// Outcome of a succeeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub source_label: usize,
    pub target_label: usize,
    pub label_names: Vec<String>,
    pub input_probs: Vec<f64>,
    pub counterfactual_probs: Vec<f64>,
    pub pre_explanation_flipped: bool,
    pub flipped: bool,
    pub mask_fraction: f64,
    pub objective_trace: Vec<f64>,
    pub attack_ms: f64,
    pub refine_ms: f64,
}

impl RunSummary {
    pub fn from_result(r: &CounterfactualResult, label_names: Vec<String>) -> Self {
        Self {
            source_label: r.source_label,
            target_label: r.target_label,
            label_names,
            input_probs: r.input_probs.clone(),
            counterfactual_probs: r.counterfactual_probs.clone(),
            pre_explanation_flipped: r.pre_explanation.flipped,
            flipped: r.flipped,
            mask_fraction: r.mask.fraction(),
            objective_trace: r.pre_explanation.objective_trace.clone(),
            attack_ms: r.timing.attack_ms,
            refine_ms: r.timing.refine_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub id: String,
    pub status: RunStatus,
    pub request: RunRequest,
    pub seed: u64,
    /// Effective configuration, once resolved.
    pub config: Option<ExplainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
    /// Artifact name to URL path; present only once the run succeeded.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, Value>,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

impl RunRecord {
    pub fn new(id: String, request: RunRequest, config: Option<ExplainConfig>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: request.seed,
            id,
            status: RunStatus::Queued,
            request,
            config,
            reason: None,
            progress: None,
            artifacts: BTreeMap::new(),
            summary: None,
            metrics: BTreeMap::new(),
            created_at: now(),
            started_at: None,
            finished_at: None,
        }
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
