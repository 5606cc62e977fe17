use candle_core::{DType, Tensor, Var};

use crate::diffusion::{filter, Denoiser, Timesteps};
use crate::engine::config::{AttackConfig, AttackMethod};
use crate::engine::objective::{rows_f64, Objective};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::noise::{NoiseRng, ATTACK_STREAM, PROBE_STREAM};
use crate::zoo::{argmax, probs_rows, Classifier};

/// Result of the adversarial optimisation for one instance.
#[derive(Debug, Clone)]
pub struct PreExplanation {
    /// Filtered final iterate `[C, H, W]`, the image the mask and the
    /// refinement start from.
    pub image: Tensor,
    /// Final iterate `[C, H, W]` before filtering.
    pub iterate: Tensor,
    /// Objective value at every executed iteration.
    pub objective_trace: Vec<f64>,
    /// Target-class probability of the filtered final iterate.
    pub final_target_prob: f64,
    /// Whether the filtered final iterate is classified as the target.
    pub flipped: bool,
}

/// Progress of a batched attack, reported after every iteration.
#[derive(Debug, Clone)]
pub struct AttackProgress {
    pub iteration: usize,
    pub total: usize,
    /// Per-instance objective at this iteration.
    pub objective: Vec<f64>,
}

/// One update: `x - a * sign(g)` for PGD, `x - a * g` otherwise, clipped to
/// the pixel range. No perturbation budget is enforced.
pub fn attack_step(x: &Tensor, grad: &Tensor, method: AttackMethod, step_size: f64) -> Result<Tensor> {
    if x.dims() != grad.dims() {
        return Err(Error::validation(format!(
            "gradient shape {:?} does not match image shape {:?}",
            grad.dims(),
            x.dims()
        )));
    }
    let direction = match method {
        AttackMethod::Pgd => grad.sign()?,
        AttackMethod::Gd | AttackMethod::Cw => grad.clone(),
    };
    Ok((x - (direction * step_size)?)?.clamp(-1.0, 1.0)?)
}

/// The classification side of an attack request.
pub struct AttackTargets<'a> {
    /// Current predictions; used by the margin objective.
    pub sources: &'a [usize],
    pub targets: &'a [usize],
    /// One seed per instance; instance noise depends only on its own seed.
    pub seeds: &'a [u64],
}

/// Optimises a batch `[B, C, H, W]` of inputs towards their targets through
/// the diffusion filter. Instances are independent: each has its own noise
/// stream and its own gradient.
pub fn generate_pre_explanations(
    inputs: &Tensor,
    request: &AttackTargets<'_>,
    classifier: &dyn Classifier,
    denoiser: &dyn Denoiser,
    steps: &dyn Timesteps,
    config: &AttackConfig,
    progress: &mut dyn FnMut(&AttackProgress),
) -> Result<Vec<PreExplanation>> {
    let geometry: Geometry = classifier.geometry();
    if denoiser.geometry() != geometry {
        return Err(Error::validation(format!(
            "classifier expects {geometry} images but the denoiser works on {}",
            denoiser.geometry()
        )));
    }
    let b = geometry.check_batch(inputs)?;
    if request.sources.len() != b || request.targets.len() != b || request.seeds.len() != b {
        return Err(Error::validation("one source label, target label and seed is needed per instance"));
    }
    let mut problems = Vec::new();
    config.validate(&mut problems);
    if config.tau > steps.len() {
        problems.push(format!("tau {} exceeds the {}-step schedule", config.tau, steps.len()));
    }
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }

    let objective = Objective {
        classifier,
        denoiser,
        steps,
        config,
        sources: request.sources,
        targets: request.targets,
    };
    let alpha = config.effective_step_size();
    let total = config.effective_iterations();
    let mut noise = NoiseRng::new(request.seeds, ATTACK_STREAM);
    let mut x = inputs.clone();
    let mut traces = vec![Vec::with_capacity(total); b];
    for iteration in 0..total {
        let var = Var::from_tensor(&x)?;
        let eval = objective.evaluate(var.as_tensor(), inputs, &mut noise)?;
        let values = rows_f64(&eval.total)?;
        let grads = eval.total.sum_all()?.backward()?;
        let grad = grads
            .get(var.as_tensor())
            .cloned()
            .unwrap_or(x.zeros_like()?);
        let grad_sums = rows_f64(&grad.to_dtype(DType::F64)?.abs()?.flatten_from(1)?.sum(1)?)?;
        if let Some(instance) = grad_sums.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration, instance });
        }
        for (trace, v) in traces.iter_mut().zip(&values) {
            trace.push(*v);
        }
        x = attack_step(&x, &grad, config.method, alpha)?;
        progress(&AttackProgress { iteration: iteration + 1, total, objective: values });
    }

    let probe = filter(&x, config.tau, denoiser, steps, &mut NoiseRng::new(request.seeds, PROBE_STREAM))?;
    let probs = probs_rows(classifier, &probe)?;
    (0..b)
        .map(|i| {
            let target = request.targets[i];
            Ok(PreExplanation {
                image: probe.get(i)?,
                iterate: x.get(i)?,
                objective_trace: std::mem::take(&mut traces[i]),
                final_target_prob: probs[i][target],
                flipped: argmax(&probs[i]) == target,
            })
        })
        .collect()
}
