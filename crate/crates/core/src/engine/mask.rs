use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary map of the pixels the refinement may change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    /// Row-major `0`/`1` values.
    pub bits: Vec<u8>,
    /// Normalised, dilated difference magnitude before thresholding.
    pub magnitude: Vec<f64>,
    pub dilation: usize,
    pub threshold: f64,
}

impl Mask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
            magnitude: vec![1.0; height * width],
            dilation: 1,
            threshold: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    /// `[1, H, W]` tensor of 0/1 values in `dtype`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let data: Vec<f32> = self.bits.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(data, (1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Square grayscale dilation (moving maximum) with a `size x size` window
/// clipped at the borders.
pub fn dilate(values: &[f64], height: usize, width: usize, size: usize) -> Vec<f64> {
    let r = size / 2;
    let mut rows = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            rows[y * width + x] = values[y * width + lo..=y * width + hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(height - 1);
            out[y * width + x] = (lo..=hi).map(|yy| rows[yy * width + x]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Sums `|x - x_pre|` over channels, divides by the global maximum, dilates
/// with a `dilation x dilation` square, and keeps pixels `>= threshold`.
/// Identical images give an empty mask.
pub fn compute_mask(x: &Tensor, x_pre: &Tensor, dilation: usize, threshold: f64) -> Result<Mask> {
    if x.dims() != x_pre.dims() {
        return Err(Error::validation(format!("shapes {:?} and {:?} differ", x.dims(), x_pre.dims())));
    }
    if dilation == 0 || dilation % 2 == 0 {
        return Err(Error::validation(format!("dilation must be a positive odd integer, got {dilation}")));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::validation(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let (c, h, w) = x.dims3()?;
    let a = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let b = x_pre.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let mut sum = vec![0.0f64; plane];
    for ch in 0..c {
        for p in 0..plane {
            sum[p] += (a[ch * plane + p] - b[ch * plane + p]).abs();
        }
    }
    let max = sum.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Mask { height: h, width: w, bits: vec![0; plane], magnitude: vec![0.0; plane], dilation, threshold });
    }
    let normalized: Vec<f64> = sum.iter().map(|v| v / max).collect();
    let magnitude = dilate(&normalized, h, w, dilation);
    let bits = magnitude.iter().map(|&m| u8::from(m >= threshold)).collect();
    Ok(Mask { height: h, width: w, bits, magnitude, dilation, threshold })
}
