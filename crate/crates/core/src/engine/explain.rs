use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::engine::attack::{generate_pre_explanations, AttackProgress, AttackTargets, PreExplanation};
use crate::engine::config::ExplainConfig;
use crate::engine::mask::{compute_mask, Mask};
use crate::engine::repaint::repaint_refine;
use crate::error::{Error, Result};
use crate::zoo::{argmax, probs_rows, Classifier};

/// Wall-clock cost of the two stages, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub attack_ms: f64,
    pub refine_ms: f64,
}

/// A complete explanation of one instance.
#[derive(Debug, Clone)]
pub struct CounterfactualResult {
    /// `[C, H, W]`.
    pub input: Tensor,
    pub source_label: usize,
    pub target_label: usize,
    pub pre_explanation: PreExplanation,
    pub mask: Mask,
    /// `[C, H, W]`.
    pub counterfactual: Tensor,
    pub input_probs: Vec<f64>,
    pub counterfactual_probs: Vec<f64>,
    /// Whether the counterfactual is classified as the target.
    pub flipped: bool,
    pub config: ExplainConfig,
    pub seed: u64,
    pub timing: Timing,
}

/// A classifier to explain and the diffusion model used to explain it.
pub struct Explainer<'a> {
    pub classifier: &'a dyn Classifier,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
}

/// One instance to explain.
#[derive(Debug, Clone)]
pub struct Request {
    /// `[C, H, W]`.
    pub image: Tensor,
    pub target: usize,
    pub seed: u64,
}

impl Explainer<'_> {
    /// Checks geometry and configuration before any work is done.
    pub fn check(&self, config: &ExplainConfig) -> Result<()> {
        if self.classifier.geometry() != self.denoiser.geometry() {
            return Err(Error::validation(format!(
                "classifier expects {} images but the denoiser works on {}",
                self.classifier.geometry(),
                self.denoiser.geometry()
            )));
        }
        config.validate_for_chain(self.schedule.num_steps())
    }

    /// Predicted labels of `[B, C, H, W]` images, with their probabilities.
    pub fn predict(&self, images: &Tensor) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let probs = probs_rows(self.classifier, images)?;
        Ok((probs.iter().map(|p| argmax(p)).collect(), probs))
    }

    /// Explains one instance.
    pub fn explain(
        &self,
        request: &Request,
        config: &ExplainConfig,
        progress: &mut dyn FnMut(&AttackProgress),
    ) -> Result<CounterfactualResult> {
        let mut out = self.explain_batch(std::slice::from_ref(request), config, progress)?;
        Ok(out.remove(0))
    }

    /// Explains a batch of instances in lock step. Each instance draws noise
    /// from its own seed only.
    pub fn explain_batch(
        &self,
        requests: &[Request],
        config: &ExplainConfig,
        progress: &mut dyn FnMut(&AttackProgress),
    ) -> Result<Vec<CounterfactualResult>> {
        self.check(config)?;
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let classes = self.classifier.num_classes();
        let geometry = self.classifier.geometry();
        for r in requests {
            geometry.check_image(&r.image)?;
            if r.target >= classes {
                return Err(Error::validation(format!("target label {} out of range for {classes} classes", r.target)));
            }
        }
        let images: Vec<Tensor> = requests.iter().map(|r| r.image.clone()).collect();
        let inputs = Tensor::stack(&images, 0)?;
        let (sources, input_probs) = self.predict(&inputs)?;
        for (i, r) in requests.iter().enumerate() {
            if sources[i] == r.target {
                return Err(Error::validation("target equals prediction"));
            }
        }
        let targets: Vec<usize> = requests.iter().map(|r| r.target).collect();
        let seeds: Vec<u64> = requests.iter().map(|r| r.seed).collect();

        let started = Instant::now();
        let attack_steps = self.schedule.respace(config.attack.respacing)?;
        let pre = generate_pre_explanations(
            &inputs,
            &AttackTargets { sources: &sources, targets: &targets, seeds: &seeds },
            self.classifier,
            self.denoiser,
            &attack_steps,
            &config.attack,
            progress,
        )?;
        let attack_ms = started.elapsed().as_secs_f64() * 1e3 / requests.len() as f64;

        let started = Instant::now();
        let masks = requests
            .iter()
            .zip(&pre)
            .map(|(r, p)| {
                if config.refine.use_mask {
                    compute_mask(&r.image, &p.image, config.refine.dilation, config.refine.threshold)
                } else {
                    Ok(Mask::ones(geometry.height, geometry.width))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let counterfactuals = self.refine(&inputs, &pre, &masks, config, &seeds)?;
        let refine_ms = started.elapsed().as_secs_f64() * 1e3 / requests.len() as f64;

        let (_, cf_probs) = self.predict(&counterfactuals)?;
        let timing = Timing { attack_ms, refine_ms };
        pre.into_iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (pre, mask))| {
                Ok(CounterfactualResult {
                    input: requests[i].image.clone(),
                    source_label: sources[i],
                    target_label: targets[i],
                    pre_explanation: pre,
                    mask,
                    counterfactual: counterfactuals.get(i)?,
                    input_probs: input_probs[i].clone(),
                    flipped: argmax(&cf_probs[i]) == targets[i],
                    counterfactual_probs: cf_probs[i].clone(),
                    config: config.clone(),
                    seed: seeds[i],
                    timing,
                })
            })
            .collect()
    }

    fn refine(
        &self,
        inputs: &Tensor,
        pre: &[PreExplanation],
        masks: &[Mask],
        config: &ExplainConfig,
        seeds: &[u64],
    ) -> Result<Tensor> {
        let images: Vec<Tensor> = pre.iter().map(|p| p.image.clone()).collect();
        let pre_batch = Tensor::stack(&images, 0)?;
        let steps = self.schedule.respace(config.refine_respacing())?;
        repaint_refine(inputs, &pre_batch, masks, config.refine_tau(), self.denoiser, &steps, seeds)
    }
}
