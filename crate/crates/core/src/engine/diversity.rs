use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::attack::AttackProgress;
use crate::engine::config::ExplainConfig;
use crate::engine::explain::{CounterfactualResult, Explainer, Request};
use crate::error::{Error, Result};

/// Refinement depth that keeps `tau / respacing` at the base ratio.
pub fn scaled_tau(base_tau: usize, base_respacing: usize, respacing: usize) -> usize {
    ((respacing * base_tau) as f64 / base_respacing as f64).round() as usize
}

/// The refinement respacing a seed selects from the configured candidates.
pub fn respacing_for_seed(config: &ExplainConfig, seed: u64) -> usize {
    let list = &config.diversity.respacings;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    list[rng.random_range(0..list.len())]
}

/// The per-run configuration the diversity protocol derives from `config`
/// for `seed`: the refinement respacing is drawn from the seed, the
/// refinement depth is scaled to keep the base depth ratio, and the mask
/// is disabled.
pub fn diversity_run_config(config: &ExplainConfig, seed: u64, num_steps: usize) -> Result<ExplainConfig> {
    if config.diversity.respacings.is_empty() {
        return Err(Error::config("diversity.respacings is empty"));
    }
    let respacing = respacing_for_seed(config, seed);
    if respacing > num_steps {
        return Err(Error::config(format!("diversity respacing {respacing} exceeds the {num_steps}-step chain")));
    }
    let mut run_config = config.clone();
    run_config.refine.respacing = Some(respacing);
    run_config.refine.tau = Some(scaled_tau(config.refine_tau(), config.refine_respacing(), respacing));
    run_config.refine.use_mask = false;
    Ok(run_config)
}

/// Several explanations of one instance, one per seed, each with its
/// [`diversity_run_config`].
pub fn diverse_explanations(
    explainer: &Explainer<'_>,
    image: &candle_core::Tensor,
    target: usize,
    seeds: &[u64],
    config: &ExplainConfig,
    progress: &mut dyn FnMut(usize, &AttackProgress),
) -> Result<Vec<CounterfactualResult>> {
    if seeds.len() < 2 {
        return Err(Error::validation(format!("diversity needs at least 2 explanations, got {}", seeds.len())));
    }
    explainer.check(config)?;
    let num_steps = explainer.schedule.num_steps();
    let mut out = Vec::with_capacity(seeds.len());
    for (k, &seed) in seeds.iter().enumerate() {
        let run_config = diversity_run_config(config, seed, num_steps)?;
        let request = Request { image: image.clone(), target, seed };
        out.push(explainer.explain(&request, &run_config, &mut |p| progress(k, p))?);
    }
    Ok(out)
}
