//! Forward noising, single reverse steps, and the diffusion filter built
//! from them. Every function here is a pure tensor expression, so gradients
//! flow from the output back to the input image.

use candle_core::Tensor;

use crate::diffusion::denoiser::Denoiser;
use crate::diffusion::schedule::Timesteps;
use crate::error::{Error, Result};
use crate::noise::NoiseRng;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!(
            "{what}: shape {:?} does not match {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

/// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn diffuse(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(x0, eps, "noise")?;
    Ok(((x0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Samples `x_step` from a clean image with caller-supplied noise.
pub fn forward_diffuse(x0: &Tensor, step: usize, eps: &Tensor, steps: &dyn Timesteps) -> Result<Tensor> {
    if step > steps.len() {
        return Err(Error::validation(format!("step {step} outside 0..={}", steps.len())));
    }
    diffuse(x0, steps.alpha_bar(step), eps)
}

/// One reverse step `mu + sigma * eps`; the last step (`step == 1`) returns
/// the mean without noise.
pub fn denoise_step(
    x_t: &Tensor,
    step: usize,
    eps: &Tensor,
    model: &dyn Denoiser,
    steps: &dyn Timesteps,
) -> Result<Tensor> {
    if step == 0 || step > steps.len() {
        return Err(Error::validation(format!("step {step} outside 1..={}", steps.len())));
    }
    check_same_shape(x_t, eps, "noise")?;
    let out = model.reverse(x_t, step, steps)?;
    if step == 1 {
        Ok(out.mu)
    } else {
        Ok((out.mu + (out.sigma * eps)?)?)
    }
}

/// The diffusion filter: noise `x` to level `tau`, then walk the reverse
/// chain back to a clean image. `tau == 0` returns `x` unchanged.
///
/// Noise is drawn from `noise` in a fixed order (one draw for the forward
/// jump, then one per reverse step above the last).
pub fn filter(
    x: &Tensor,
    tau: usize,
    model: &dyn Denoiser,
    steps: &dyn Timesteps,
    noise: &mut NoiseRng,
) -> Result<Tensor> {
    if tau > steps.len() {
        return Err(Error::validation(format!(
            "filter depth {tau} exceeds the {}-step schedule",
            steps.len()
        )));
    }
    if tau == 0 {
        return Ok(x.clone());
    }
    let mut x_t = forward_diffuse(x, tau, &noise.sample_like(x)?, steps)?;
    for step in (1..=tau).rev() {
        x_t = if step == 1 {
            model.reverse(&x_t, step, steps)?.mu
        } else {
            denoise_step(&x_t, step, &noise.sample_like(x)?, model, steps)?
        };
    }
    Ok(x_t)
}

/// [`filter`] with a fresh generator per instance seeded from `seeds`.
pub fn filter_seeded(
    x: &Tensor,
    tau: usize,
    model: &dyn Denoiser,
    steps: &dyn Timesteps,
    seeds: &[u64],
) -> Result<Tensor> {
    let mut noise = NoiseRng::new(seeds, crate::noise::ATTACK_STREAM);
    filter(x, tau, model, steps, &mut noise)
}
