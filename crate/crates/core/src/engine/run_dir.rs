//! On-disk layout of one explanation: four PNG images and a JSON manifest.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::engine::config::ExplainConfig;
use crate::engine::explain::{CounterfactualResult, Timing};
use crate::error::{Error, Result};
use crate::image::{self, Geometry};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const INPUT_PNG: &str = "input.png";
pub const PRE_EXPLANATION_PNG: &str = "pre_explanation.png";
pub const MASK_PNG: &str = "mask.png";
pub const COUNTERFACTUAL_PNG: &str = "counterfactual.png";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const ARTIFACTS: [&str; 4] = [INPUT_PNG, PRE_EXPLANATION_PNG, MASK_PNG, COUNTERFACTUAL_PNG];

/// Machine-readable record of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub geometry: Geometry,
    pub label_names: Vec<String>,
    pub source_label: usize,
    pub target_label: usize,
    pub input_probs: Vec<f64>,
    pub counterfactual_probs: Vec<f64>,
    pub pre_explanation_target_prob: f64,
    pub pre_explanation_flipped: bool,
    pub flipped: bool,
    pub objective_trace: Vec<f64>,
    pub mask_fraction: f64,
    pub seed: u64,
    /// Effective configuration after all defaults and overrides.
    pub config: ExplainConfig,
    /// How the run was requested (assets, instance, overrides), echoed
    /// verbatim.
    #[serde(default)]
    pub invocation: serde_json::Value,
    /// Wall-clock data; dropped from the canonical form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl Manifest {
    pub fn from_result(result: &CounterfactualResult, label_names: Vec<String>, invocation: serde_json::Value) -> Result<Self> {
        let (c, h, w) = result.input.dims3()?;
        Ok(Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            geometry: Geometry::new(c, h, w),
            label_names,
            source_label: result.source_label,
            target_label: result.target_label,
            input_probs: result.input_probs.clone(),
            counterfactual_probs: result.counterfactual_probs.clone(),
            pre_explanation_target_prob: result.pre_explanation.final_target_prob,
            pre_explanation_flipped: result.pre_explanation.flipped,
            flipped: result.flipped,
            objective_trace: result.pre_explanation.objective_trace.clone(),
            mask_fraction: result.mask.fraction(),
            seed: result.seed,
            config: result.config.clone(),
            invocation,
            timing: Some(result.timing),
            created_at: None,
        })
    }

    /// The manifest without wall-clock fields; equal runs give equal bytes.
    pub fn canonical(&self) -> Self {
        Self { timing: None, created_at: None, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Writes the four images and the manifest into `dir`.
pub fn write_run_dir(dir: impl AsRef<Path>, result: &CounterfactualResult, manifest: &Manifest) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    image::save_png(&result.input, dir.join(INPUT_PNG))?;
    image::save_png(&result.pre_explanation.image, dir.join(PRE_EXPLANATION_PNG))?;
    image::save_mask_png(&result.mask.bits, result.mask.height, result.mask.width, dir.join(MASK_PNG))?;
    image::save_png(&result.counterfactual, dir.join(COUNTERFACTUAL_PNG))?;
    let tmp = dir.join(format!("{MANIFEST_JSON}.tmp"));
    std::fs::write(&tmp, manifest.to_json()?)?;
    std::fs::rename(tmp, dir.join(MANIFEST_JSON))?;
    Ok(())
}

/// A run directory read back for evaluation.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub manifest: Manifest,
    pub input: Tensor,
    pub counterfactual: Tensor,
    /// Row-major 0/1 mask.
    pub mask: Vec<u8>,
}

pub fn read_run_dir(dir: impl AsRef<Path>) -> Result<StoredRun> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_JSON);
    if !manifest_path.exists() {
        return Err(Error::NotFound(format!("run manifest {}", manifest_path.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::validation(format!(
            "{}: unsupported manifest schema {}",
            manifest_path.display(),
            manifest.schema_version
        )));
    }
    let c = manifest.geometry.channels;
    let input = image::load_png(dir.join(INPUT_PNG), c)?;
    let counterfactual = image::load_png(dir.join(COUNTERFACTUAL_PNG), c)?;
    let mask_img = image::load_png(dir.join(MASK_PNG), 1)?;
    let mask = mask_img.flatten_all()?.to_vec1::<f32>()?.iter().map(|&v| u8::from(v > 0.0)).collect();
    Ok(StoredRun { manifest, input, counterfactual, mask })
}
