use candle_core::{DType, Tensor};

use crate::diffusion::{denoise_step, forward_diffuse, Denoiser, Timesteps};
use crate::engine::mask::Mask;
use crate::error::{Error, Result};
use crate::noise::{NoiseRng, REFINE_STREAM};

/// Stacks masks into a `[B, 1, H, W]` 0/1 tensor.
fn stack_masks(masks: &[Mask], dtype: DType) -> Result<Tensor> {
    let ts = masks.iter().map(|m| m.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Inside the mask take `inside`, elsewhere `outside`. Values are selected,
/// not blended, so outside pixels are copied bit for bit.
fn collage(mask: &Tensor, inside: &Tensor, outside: &Tensor) -> Result<Tensor> {
    let m = mask.to_dtype(DType::U8)?.broadcast_as(inside.shape())?;
    Ok(m.where_cond(inside, outside)?)
}

/// Masked re-denoising of pre-explanations (`[B, C, H, W]`).
///
/// The pre-explanation is noised to level `tau`; at every level the current
/// reconstruction is kept inside the mask and replaced by the input noised
/// to the same level outside it, then denoised one step. A final collage
/// with the clean input makes the result equal to the input wherever the
/// mask is 0.
pub fn repaint_refine(
    inputs: &Tensor,
    pre: &Tensor,
    masks: &[Mask],
    tau: usize,
    denoiser: &dyn Denoiser,
    steps: &dyn Timesteps,
    seeds: &[u64],
) -> Result<Tensor> {
    if inputs.dims() != pre.dims() {
        return Err(Error::validation(format!("shapes {:?} and {:?} differ", inputs.dims(), pre.dims())));
    }
    let (b, _, h, w) = inputs.dims4()?;
    if masks.len() != b || seeds.len() != b {
        return Err(Error::validation("one mask and one seed is needed per instance"));
    }
    if let Some(m) = masks.iter().find(|m| m.height != h || m.width != w) {
        return Err(Error::validation(format!("{}x{} mask for {h}x{w} images", m.height, m.width)));
    }
    if tau > steps.len() {
        return Err(Error::validation(format!("refinement depth {tau} exceeds the {}-step schedule", steps.len())));
    }
    let mask = stack_masks(masks, inputs.dtype())?;
    if tau == 0 || masks.iter().all(|m| m.count() == 0) {
        return collage(&mask, pre, inputs);
    }
    let mut noise = NoiseRng::new(seeds, REFINE_STREAM);
    let mut x_t = forward_diffuse(pre, tau, &noise.sample_like(pre)?, steps)?;
    for step in (1..=tau).rev() {
        let known = forward_diffuse(inputs, step, &noise.sample_like(inputs)?, steps)?;
        let mixed = collage(&mask, &x_t, &known)?;
        x_t = if step == 1 {
            denoiser.reverse(&mixed, step, steps)?.mu
        } else {
            denoise_step(&mixed, step, &noise.sample_like(inputs)?, denoiser, steps)?
        };
    }
    collage(&mask, &x_t.clamp(-1.0, 1.0)?, inputs)
}
