use candle_core::{DType, Device, Tensor, D};

use crate::diffusion::{filter, Denoiser, Timesteps};
use crate::engine::config::{AttackConfig, AttackMethod, DistanceAnchor, DistanceNorm};
use crate::error::{Error, Result};
use crate::noise::NoiseRng;
use crate::zoo::{cross_entropy_rows, Classifier};

/// Cross-entropy of the classifier at `images` against `targets`, per row.
pub fn classification_objective(images: &Tensor, targets: &[usize], classifier: &dyn Classifier) -> Result<Tensor> {
    cross_entropy_rows(&classifier.logits(images)?, targets)
}

/// `max(logit_source - logit_target, 0)` per row.
pub fn margin_objective(
    images: &Tensor,
    sources: &[usize],
    targets: &[usize],
    classifier: &dyn Classifier,
) -> Result<Tensor> {
    let logits = classifier.logits(images)?;
    let classes = logits.dim(D::Minus1)?;
    if let Some(&bad) = sources.iter().chain(targets).find(|&&l| l >= classes) {
        return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
    }
    let pick = |labels: &[usize]| -> Result<Tensor> {
        let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        let idx = Tensor::from_vec(idx, (labels.len(), 1), &Device::Cpu)?;
        Ok(logits.gather(&idx, 1)?.squeeze(1)?)
    };
    Ok((pick(sources)? - pick(targets)?)?.relu()?)
}

/// Per-row mean absolute (`l1`) or mean squared (`l2`) difference.
pub fn distance(a: &Tensor, b: &Tensor, norm: DistanceNorm) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!("shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    let diff = (a - b)?.flatten_from(1)?;
    let per = match norm {
        DistanceNorm::L1 => diff.abs()?,
        DistanceNorm::L2 => diff.sqr()?,
    };
    Ok(per.mean(1)?)
}

/// The attack objective for a batch of instances, bound to its models.
pub struct Objective<'a> {
    pub classifier: &'a dyn Classifier,
    pub denoiser: &'a dyn Denoiser,
    pub steps: &'a dyn Timesteps,
    pub config: &'a AttackConfig,
    pub sources: &'a [usize],
    pub targets: &'a [usize],
}

/// Value of the objective and the filtered iterate it was computed on.
pub struct Evaluation {
    /// Per-instance objective `[B]`.
    pub total: Tensor,
    pub filtered: Tensor,
}

impl Objective<'_> {
    /// Classification loss of the filtered iterate plus the weighted
    /// distance between the anchor and the original image, per instance.
    pub fn evaluate(&self, iterate: &Tensor, original: &Tensor, noise: &mut NoiseRng) -> Result<Evaluation> {
        if iterate.dims() != original.dims() {
            return Err(Error::validation(format!(
                "iterate shape {:?} does not match input shape {:?}",
                iterate.dims(),
                original.dims()
            )));
        }
        let filtered = filter(iterate, self.config.tau, self.denoiser, self.steps, noise)?;
        let class = match self.config.method {
            AttackMethod::Cw => margin_objective(&filtered, self.sources, self.targets, self.classifier)?,
            AttackMethod::Pgd | AttackMethod::Gd => classification_objective(&filtered, self.targets, self.classifier)?,
        };
        let total = if self.config.lambda_d == 0.0 {
            class
        } else {
            let anchor = match self.config.distance_anchor {
                DistanceAnchor::Iterate => iterate,
                DistanceAnchor::Filtered => &filtered,
            };
            let d = distance(anchor, original, self.config.distance_norm)?;
            (class + (d * self.config.lambda_d)?)?
        };
        Ok(Evaluation { total, filtered })
    }
}

pub(crate) fn rows_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
