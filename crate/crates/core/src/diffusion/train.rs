use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::denoiser::{DenoiserArch, EpsDenoiser, EpsNetwork};
use crate::diffusion::schedule::{NoiseSchedule, ScheduleKind, Timesteps};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::nn;

/// Noise-prediction training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub num_steps: usize,
    pub schedule: ScheduleKind,
    /// Restricts sampled timesteps to `1..=max_train_timestep`. A model
    /// trained this way can only denoise from the first part of the chain.
    pub max_train_timestep: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub arch: DenoiserArch,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            schedule: ScheduleKind::Linear,
            max_train_timestep: None,
            iterations: 3000,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ema_decay: 0.995,
            arch: DenoiserArch::default(),
            seed: 0,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.num_steps == 0 {
            problems.push("num_steps must be positive".to_string());
        }
        if let Some(max) = self.max_train_timestep {
            if max == 0 || max > self.num_steps {
                problems.push(format!("max_train_timestep {max} must lie in 1..={}", self.num_steps));
            }
        }
        if self.iterations == 0 {
            problems.push("iterations must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            problems.push("ema_decay must lie in [0, 1)".to_string());
        }
        if self.arch.hidden == 0 || self.arch.time_dim == 0 {
            problems.push("network widths must be positive".to_string());
        }
        problems
    }
}

/// Per-iteration losses and the timestep range actually sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub min_sampled_timestep: usize,
    pub max_sampled_timestep: usize,
}

impl TrainReport {
    fn window_mean(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    /// Mean loss over the first `n` iterations.
    pub fn head_loss(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean loss over the last `n` iterations.
    pub fn tail_loss(&self, n: usize) -> f64 {
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

pub(crate) fn lr_at(base: f64, iteration: usize, total: usize) -> f64 {
    let warmup = (total / 20).clamp(1, 200);
    if iteration < warmup {
        base * (iteration + 1) as f64 / warmup as f64
    } else {
        let progress = (iteration - warmup) as f64 / (total - warmup).max(1) as f64;
        base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Fits a noise-prediction network on `images` (`[N, C, H, W]`, internal
/// range) with the standard epsilon objective.
pub fn train_denoiser(images: &Tensor, config: &DenoiserTrainConfig) -> Result<(EpsDenoiser, TrainReport)> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let (n, c, h, w) = images
        .dims4()
        .map_err(|_| Error::validation(format!("expected a [N, C, H, W] image batch, got {:?}", images.dims())))?;
    if n == 0 {
        return Err(Error::validation("cannot train a denoiser on an empty dataset"));
    }
    let geometry = Geometry::new(c, h, w);
    let dtype = images.dtype();
    let schedule = NoiseSchedule::build(config.num_steps, config.schedule)?;
    let max_t = config.max_train_timestep.unwrap_or(config.num_steps);

    let init = nn::init_weights(&config.arch.param_specs(geometry), config.seed, dtype)?;
    let vars = nn::to_vars(&init)?;
    let network = EpsNetwork::from_weights(config.arch.clone(), geometry, &nn::var_weights(&vars))?;
    let mut ema = nn::freeze(&vars)?;
    let mut opt = AdamW::new(
        vars.values().cloned().collect(),
        ParamsAdamW { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d1ff);
    let mut losses = Vec::with_capacity(config.iterations);
    let (mut min_seen, mut max_seen) = (usize::MAX, 0);
    let per = geometry.numel();
    for it in 0..config.iterations {
        let bs = config.batch_size;
        let idx: Vec<u32> = (0..bs).map(|_| rng.random_range(0..n) as u32).collect();
        let ts: Vec<usize> = (0..bs).map(|_| rng.random_range(1..=max_t)).collect();
        min_seen = min_seen.min(*ts.iter().min().unwrap());
        max_seen = max_seen.max(*ts.iter().max().unwrap());
        let noise: Vec<f32> = (0..bs * per).map(|_| StandardNormal.sample(&mut rng)).collect();

        let x0 = images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
        let eps = Tensor::from_vec(noise, (bs, c, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        let sa: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect();
        let sn: Vec<f64> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt()).collect();
        let sa = Tensor::from_vec(sa, (bs, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let sn = Tensor::from_vec(sn, (bs, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let x_t = (x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?;

        let pred = network.forward(&x_t, &ts)?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        opt.set_learning_rate(lr_at(config.learning_rate, it, config.iterations));
        opt.backward_step(&loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::validation(format!("training diverged at iteration {it}")));
        }
        losses.push(value);

        let d = config.ema_decay;
        for (name, var) in &vars {
            let slot = ema.get_mut(name).expect("ema mirrors vars");
            *slot = ((&*slot * d)? + (var.as_tensor().detach() * (1.0 - d))?)?;
        }
        if it % 500 == 0 {
            tracing::debug!(iteration = it, loss = value, "denoiser training");
        }
    }

    let model = EpsDenoiser::new(config.arch.clone(), geometry, schedule, max_t, ema)?;
    Ok((model, TrainReport { losses, min_sampled_timestep: min_seen, max_sampled_timestep: max_seen }))
}
