use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::engine::run_dir::StoredRun;
use crate::error::{Error, Result};
use crate::metrics::cout::cout;
use crate::metrics::diversity::diversity;
use crate::metrics::fid::{fid, sfid, SfidResult};
use crate::metrics::flip_rate;
use crate::metrics::similarity::embedding_similarity;
use crate::zoo::{Classifier, FeatureEncoder, PerceptualDistance};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    FlipRate,
    Fid,
    Sfid,
    Fs,
    S3,
    Cout,
    Diversity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::FlipRate,
        MetricKind::Fid,
        MetricKind::Sfid,
        MetricKind::Fs,
        MetricKind::S3,
        MetricKind::Cout,
        MetricKind::Diversity,
    ];

    /// Parses a comma-separated list; `all` selects every metric.
    pub fn parse_list(s: &str) -> Result<Vec<MetricKind>> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "all" => out.extend(Self::ALL),
                other => out.push(serde_json::from_value(serde_json::Value::String(other.into())).map_err(|_| {
                    Error::config(format!("unknown metric `{other}` (flip-rate, fid, sfid, fs, s3, cout, diversity, all)"))
                })?),
            }
        }
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::config("no metrics selected"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub runs: usize,
    /// Runs whose counterfactual reached the target label.
    pub valid: usize,
    pub invalid: usize,
    pub fs_excluded_pairs: usize,
    pub s3_excluded_pairs: usize,
    /// Instances explained more than once, which enter the diversity value.
    pub diversity_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub seed: u64,
    pub counts: ReportCounts,
    pub flip_rate: Option<f64>,
    pub fid: Option<f64>,
    pub sfid: Option<SfidResult>,
    pub fs: Option<f64>,
    pub s3: Option<f64>,
    pub cout: Option<f64>,
    pub diversity: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Models the metrics are computed with. A metric whose model is missing
/// cannot be requested.
#[derive(Default)]
pub struct MetricSuite<'a> {
    pub classifier: Option<&'a dyn Classifier>,
    pub fid_encoder: Option<&'a dyn FeatureEncoder>,
    pub fs_encoder: Option<&'a dyn FeatureEncoder>,
    pub s3_encoder: Option<&'a dyn FeatureEncoder>,
    pub perceptual: Option<PerceptualDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationOptions {
    pub cout_steps: usize,
    pub sfid_splits: usize,
    pub seed: u64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self { cout_steps: 20, sfid_splits: 10, seed: 0 }
    }
}

fn stack(images: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let v: Vec<Tensor> = images.collect();
    Ok(Tensor::stack(&v, 0)?)
}

fn require<T>(what: Option<T>, metric: MetricKind, needs: &str) -> Result<T> {
    what.ok_or_else(|| Error::config(format!("metric {metric:?} needs {needs}")))
}

/// Computes the requested metrics over stored runs.
pub fn evaluate_runs(
    runs: &[StoredRun],
    metrics: &[MetricKind],
    suite: &MetricSuite<'_>,
    options: &EvaluationOptions,
) -> Result<MetricReport> {
    if runs.is_empty() {
        return Err(Error::validation("no runs to evaluate"));
    }
    let flags: Vec<bool> = runs.iter().map(|r| r.manifest.flipped).collect();
    let valid: Vec<&StoredRun> = runs.iter().filter(|r| r.manifest.flipped).collect();
    let mut report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: options.seed,
        counts: ReportCounts { runs: runs.len(), valid: valid.len(), invalid: runs.len() - valid.len(), ..Default::default() },
        flip_rate: None,
        fid: None,
        sfid: None,
        fs: None,
        s3: None,
        cout: None,
        diversity: None,
    };
    let need_valid = |m: MetricKind| -> Result<()> {
        if valid.len() < 2 {
            return Err(Error::validation(format!("metric {m:?} needs at least 2 valid counterfactuals, got {}", valid.len())));
        }
        Ok(())
    };
    for &metric in metrics {
        match metric {
            MetricKind::FlipRate => report.flip_rate = Some(flip_rate(&flags)?),
            MetricKind::Fid => {
                let enc = require(suite.fid_encoder, metric, "an FID encoder")?;
                need_valid(metric)?;
                let originals = stack(runs.iter().map(|r| r.input.clone()))?;
                let ces = stack(valid.iter().map(|r| r.counterfactual.clone()))?;
                report.fid = Some(fid(&originals, &ces, enc)?);
            }
            MetricKind::Sfid => {
                let enc = require(suite.fid_encoder, metric, "an FID encoder")?;
                let originals = stack(runs.iter().map(|r| r.input.clone()))?;
                let mut lookup = |idx: &[usize]| -> Result<Vec<Option<Tensor>>> {
                    Ok(idx.iter().map(|&i| runs[i].manifest.flipped.then(|| runs[i].counterfactual.clone())).collect())
                };
                report.sfid = Some(sfid(&originals, &mut lookup, enc, options.sfid_splits, options.seed)?);
            }
            MetricKind::Fs | MetricKind::S3 => {
                let enc = if metric == MetricKind::Fs {
                    require(suite.fs_encoder, metric, "a face-similarity encoder")?
                } else {
                    require(suite.s3_encoder, metric, "a self-supervised encoder")?
                };
                if valid.is_empty() {
                    return Err(Error::validation(format!("metric {metric:?} needs at least one valid counterfactual")));
                }
                let a = stack(valid.iter().map(|r| r.input.clone()))?;
                let b = stack(valid.iter().map(|r| r.counterfactual.clone()))?;
                let sim = embedding_similarity(&a, &b, enc)?;
                if metric == MetricKind::Fs {
                    report.fs = Some(sim.mean);
                    report.counts.fs_excluded_pairs = sim.excluded;
                } else {
                    report.s3 = Some(sim.mean);
                    report.counts.s3_excluded_pairs = sim.excluded;
                }
            }
            MetricKind::Cout => {
                let classifier = require(suite.classifier, metric, "the classifier")?;
                let mut sum = 0.0;
                for r in runs {
                    let m = &r.manifest;
                    sum += cout(&r.input, &r.counterfactual, classifier, m.source_label, m.target_label, options.cout_steps)?;
                }
                report.cout = Some(sum / runs.len() as f64);
            }
            MetricKind::Diversity => {
                let distance = require(suite.perceptual.clone(), metric, "a perceptual encoder")?;
                let mut groups: BTreeMap<Vec<u32>, Vec<Tensor>> = BTreeMap::new();
                for r in runs {
                    let key: Vec<u32> = r.input.flatten_all()?.to_vec1::<f32>()?.iter().map(|v| v.to_bits()).collect();
                    groups.entry(key).or_default().push(r.counterfactual.clone());
                }
                let multi: Vec<&Vec<Tensor>> = groups.values().filter(|g| g.len() >= 2).collect();
                if multi.is_empty() {
                    return Err(Error::validation("diversity needs at least one instance explained twice"));
                }
                let mut sum = 0.0;
                for g in &multi {
                    sum += diversity(g, &distance)?;
                }
                report.counts.diversity_groups = multi.len();
                report.diversity = Some(sum / multi.len() as f64);
            }
        }
    }
    Ok(report)
}
