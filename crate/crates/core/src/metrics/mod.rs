//! Evaluation of counterfactual explanations: flip rate, Frechet distances,
//! embedding similarity, the insertion-curve transition score, and
//! diversity.

mod cout;
mod diversity;
mod fid;
mod gaussian;
mod report;
mod similarity;

pub use cout::{cout, transition_sequence};
pub use diversity::{distinct_count, diversity, mean_pairwise};
pub use fid::{encode_all, fid, sfid, SfidResult};
pub use gaussian::{frechet_distance, GaussianStats};
pub use report::{evaluate_runs, EvaluationOptions, MetricKind, MetricReport, MetricSuite, ReportCounts, REPORT_SCHEMA_VERSION};
pub use similarity::{embedding_similarity, mean_cosine, SimilarityResult};

use crate::error::{Error, Result};

/// Fraction of `true` flags.
pub fn flip_rate(flipped: &[bool]) -> Result<f64> {
    if flipped.is_empty() {
        return Err(Error::validation("flip rate of an empty result list"));
    }
    Ok(flipped.iter().filter(|&&f| f).count() as f64 / flipped.len() as f64)
}
