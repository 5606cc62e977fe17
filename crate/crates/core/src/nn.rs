//! Minimal layers shared by the desk-scale networks.
//!
//! Networks are built from a named map of tensors. For training the tensors
//! are backed by [`Var`]s; for inference they are plain constants, so
//! gradients taken with respect to an input never accumulate into weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Weights = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in `±scale / sqrt(fan_in)`.
    FanIn { fan_in: usize, scale: f64 },
    Zeros,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn linear(prefix: &str, input: usize, output: usize) -> [ParamSpec; 2] {
        Self::linear_scaled(prefix, input, output, 1.0)
    }

    pub fn linear_scaled(prefix: &str, input: usize, output: usize, scale: f64) -> [ParamSpec; 2] {
        let init = Init::FanIn { fan_in: input, scale };
        [
            ParamSpec { name: format!("{prefix}.weight"), shape: vec![input, output], init },
            ParamSpec { name: format!("{prefix}.bias"), shape: vec![output], init },
        ]
    }

    pub fn zeros(name: &str, shape: &[usize]) -> ParamSpec {
        ParamSpec { name: name.to_string(), shape: shape.to_vec(), init: Init::Zeros }
    }
}

/// Draws initial weights from a seeded generator.
pub(crate) fn init_weights(specs: &[ParamSpec], seed: u64, dtype: DType) -> Result<Weights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Weights::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn { fan_in, scale } => {
                let bound = scale / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, spec.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
        out.insert(spec.name.clone(), t);
    }
    Ok(out)
}

/// Wraps every weight into a trainable variable.
pub(crate) fn to_vars(weights: &Weights) -> Result<BTreeMap<String, Var>> {
    weights
        .iter()
        .map(|(k, t)| Ok((k.clone(), Var::from_tensor(t)?)))
        .collect()
}

/// Weights viewed through their variables; gradients flow back to the vars.
pub(crate) fn var_weights(vars: &BTreeMap<String, Var>) -> Weights {
    vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
}

/// Detached snapshot of trained variables.
pub(crate) fn freeze(vars: &BTreeMap<String, Var>) -> Result<Weights> {
    vars.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
        .collect()
}

pub(crate) fn fetch(weights: &Weights, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = weights
        .get(name)
        .ok_or_else(|| Error::validation(format!("missing weight `{name}`")))?;
    if t.dims() != shape {
        return Err(Error::validation(format!(
            "weight `{name}` has shape {:?}, expected {shape:?}",
            t.dims()
        )));
    }
    Ok(t.clone())
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn load(weights: &Weights, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: fetch(weights, &format!("{prefix}.weight"), &[input, output])?,
            bias: fetch(weights, &format!("{prefix}.bias"), &[output])?,
        })
    }

    /// `x` is `[N, input]`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.to_dtype(self.weight.dtype())?.matmul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub(crate) fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits `[B, C, H, W]` into non-overlapping `p x p` patches:
/// `[B, (H/p)(W/p), C p p]`.
pub(crate) fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::validation(format!(
            "patch size {patch} does not divide the {h}x{w} image"
        )));
    }
    let (nh, nw) = (h / patch, w / patch);
    Ok(x.reshape((b, c, nh, patch, nw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, nh * nw, c * patch * patch))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_groups_neighbouring_pixels() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.dims(), &[1, 4, 4]);
        let first = p.get(0).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(first, vec![0.0, 1.0, 4.0, 5.0]);
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let specs = ParamSpec::linear("l", 3, 2);
        let a = init_weights(&specs, 5, DType::F32).unwrap();
        let b = init_weights(&specs, 5, DType::F32).unwrap();
        for (k, t) in &a {
            assert_eq!(
                t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                b[k].flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }
}
