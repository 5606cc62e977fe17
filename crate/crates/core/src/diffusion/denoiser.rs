use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AssetKind};
use crate::diffusion::schedule::{NoiseSchedule, Timesteps};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::nn::{self, Linear, ParamSpec, Weights};

/// Mean and per-pixel scale of one reverse transition.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// A reverse diffusion chain: predicts `x_{step-1}` from `x_step`.
///
/// Implementations must be deterministic and differentiable with respect to
/// the input image.
pub trait Denoiser: Send + Sync {
    fn geometry(&self) -> Geometry;

    fn reverse(&self, x_t: &Tensor, step: usize, steps: &dyn Timesteps) -> Result<DenoiserOutput>;
}

/// Shape of the noise-prediction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { hidden: 512, depth: 2, time_dim: 64 }
    }
}

impl DenoiserArch {
    pub(crate) fn param_specs(&self, geometry: Geometry) -> Vec<ParamSpec> {
        let d = geometry.numel();
        let h = self.hidden;
        let mut specs = Vec::new();
        specs.extend(ParamSpec::linear("time.0", self.time_dim, h));
        specs.extend(ParamSpec::linear("time.1", h, h));
        specs.extend(ParamSpec::linear("input", d, h));
        for i in 0..self.depth {
            specs.extend(ParamSpec::linear(&format!("block.{i}.time"), h, h));
            specs.extend(ParamSpec::linear(&format!("block.{i}.fc0"), h, h));
            specs.extend(ParamSpec::linear_scaled(&format!("block.{i}.fc1"), h, h, 0.5));
        }
        specs.push(ParamSpec::zeros("output.weight", &[h, d]));
        specs.push(ParamSpec::zeros("output.bias", &[d]));
        specs
    }
}

struct Block {
    time: Linear,
    fc0: Linear,
    fc1: Linear,
}

/// Residual MLP that predicts the noise component of `x_t`.
pub struct EpsNetwork {
    arch: DenoiserArch,
    geometry: Geometry,
    time0: Linear,
    time1: Linear,
    input: Linear,
    blocks: Vec<Block>,
    output: Linear,
}

impl EpsNetwork {
    pub fn from_weights(arch: DenoiserArch, geometry: Geometry, weights: &Weights) -> Result<Self> {
        let (d, h) = (geometry.numel(), arch.hidden);
        let blocks = (0..arch.depth)
            .map(|i| {
                Ok(Block {
                    time: Linear::load(weights, &format!("block.{i}.time"), h, h)?,
                    fc0: Linear::load(weights, &format!("block.{i}.fc0"), h, h)?,
                    fc1: Linear::load(weights, &format!("block.{i}.fc1"), h, h)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            time0: Linear::load(weights, "time.0", arch.time_dim, h)?,
            time1: Linear::load(weights, "time.1", h, h)?,
            input: Linear::load(weights, "input", d, h)?,
            output: Linear::load(weights, "output", h, d)?,
            blocks,
            arch,
            geometry,
        })
    }

    /// Predicts noise for `x_t` (`[B, C, H, W]`); `timesteps` holds either one
    /// shared timestep or one per row.
    pub fn forward(&self, x_t: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let b = self.geometry.check_batch(x_t)?;
        if timesteps.len() != 1 && timesteps.len() != b {
            return Err(Error::validation(format!(
                "{} timesteps supplied for a batch of {b}",
                timesteps.len()
            )));
        }
        let dtype = x_t.dtype();
        let emb = nn::timestep_embedding(timesteps, self.arch.time_dim, dtype)?;
        let temb = self.time1.forward(&self.time0.forward(&emb)?.silu()?)?.silu()?;
        let x = x_t.flatten_from(1)?;
        let mut h = self.input.forward(&x)?.broadcast_add(&temb)?;
        for block in &self.blocks {
            let t = block.time.forward(&temb)?;
            let inner = block.fc0.forward(&h.silu()?)?.broadcast_add(&t)?.silu()?;
            h = (h + block.fc1.forward(&inner)?)?;
        }
        let out = self.output.forward(&h.silu()?)?;
        Ok(out.reshape(x_t.shape())?)
    }
}

/// Header stored alongside denoiser weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserHeader {
    pub arch: DenoiserArch,
    pub geometry: Geometry,
    pub num_steps: usize,
    pub max_train_timestep: usize,
    pub dtype: String,
}

/// A trained noise-prediction network bound to its diffusion schedule.
pub struct EpsDenoiser {
    network: EpsNetwork,
    schedule: NoiseSchedule,
    max_timestep: usize,
    weights: Weights,
}

impl EpsDenoiser {
    pub fn new(arch: DenoiserArch, geometry: Geometry, schedule: NoiseSchedule, max_timestep: usize, weights: Weights) -> Result<Self> {
        let network = EpsNetwork::from_weights(arch, geometry, &weights)?;
        if max_timestep == 0 || max_timestep > schedule.num_steps() {
            return Err(Error::validation(format!(
                "trained timestep range 1..={max_timestep} does not fit a {}-step schedule",
                schedule.num_steps()
            )));
        }
        Ok(Self { network, schedule, max_timestep, weights })
    }

    /// Randomly initialised model, mostly useful for tests.
    pub fn random(arch: DenoiserArch, geometry: Geometry, schedule: NoiseSchedule, seed: u64, dtype: DType) -> Result<Self> {
        let mut specs = arch.param_specs(geometry);
        // Non-zero output so the network is not trivially constant.
        for s in specs.iter_mut().filter(|s| s.name.starts_with("output.")) {
            s.init = nn::Init::FanIn { fan_in: arch.hidden, scale: 1.0 };
        }
        let weights = nn::init_weights(&specs, seed, dtype)?;
        let max = schedule.num_steps();
        Self::new(arch, geometry, schedule, max, weights)
    }

    /// Same model restricted to base timesteps `1..=max_timestep`.
    pub fn with_max_timestep(self, max_timestep: usize) -> Result<Self> {
        Self::new(self.network.arch.clone(), self.network.geometry, self.schedule, max_timestep, self.weights)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn network(&self) -> &EpsNetwork {
        &self.network
    }

    /// Highest base timestep the network was trained on.
    pub fn max_timestep(&self) -> usize {
        self.max_timestep
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DenoiserHeader {
            arch: self.network.arch.clone(),
            geometry: self.network.geometry,
            num_steps: self.schedule.num_steps(),
            max_train_timestep: self.max_timestep,
            dtype: format!("{:?}", self.weights.values().next().map(|t| t.dtype()).unwrap_or(DType::F32)),
        };
        let mut tensors = self.weights.clone();
        tensors.insert(
            "schedule.betas".into(),
            Tensor::from_vec(self.schedule.betas().to_vec(), self.schedule.num_steps(), &candle_core::Device::Cpu)?,
        );
        checkpoint::save(path, AssetKind::Denoiser, &header, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut archive = checkpoint::load(path)?;
        archive.expect_kind(AssetKind::Denoiser)?;
        let header: DenoiserHeader = archive.header_as()?;
        let betas = archive
            .tensors
            .remove("schedule.betas")
            .ok_or_else(|| Error::Checkpoint { path: archive.path.clone(), reason: "missing schedule".into() })?
            .to_vec1::<f64>()?;
        let schedule = NoiseSchedule::from_betas(betas)?;
        if schedule.num_steps() != header.num_steps {
            return Err(Error::Checkpoint { path: archive.path.clone(), reason: "schedule length mismatch".into() });
        }
        Self::new(header.arch, header.geometry, schedule, header.max_train_timestep, archive.tensors)
    }

    /// Same model with weights cast to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let weights = self
            .weights
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<Weights>>()?;
        Self::new(self.network.arch.clone(), self.network.geometry, self.schedule.clone(), self.max_timestep, weights)
    }
}

impl Denoiser for EpsDenoiser {
    fn geometry(&self) -> Geometry {
        self.network.geometry
    }

    fn reverse(&self, x_t: &Tensor, step: usize, steps: &dyn Timesteps) -> Result<DenoiserOutput> {
        if step == 0 || step > steps.len() {
            return Err(Error::validation(format!("step {step} outside 1..={}", steps.len())));
        }
        let t = steps.model_timestep(step);
        if t > self.max_timestep {
            return Err(Error::validation(format!(
                "timestep {t} lies beyond the trained range 1..={}",
                self.max_timestep
            )));
        }
        let ab = steps.alpha_bar(step);
        let beta = steps.beta(step);
        let eps = self.network.forward(x_t, &[t])?;
        // mu = (x_t - beta / sqrt(1 - ab) * eps) / sqrt(1 - beta)
        let mu = ((x_t - (eps * (beta / (1.0 - ab).sqrt()))?)? / (1.0 - beta).sqrt())?;
        let sigma = mu.ones_like()?.affine(steps.posterior_variance(step).sqrt(), 0.0)?;
        Ok(DenoiserOutput { mu, sigma })
    }
}
