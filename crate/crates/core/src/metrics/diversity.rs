use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::zoo::PerceptualDistance;

/// Mean of `distance` over all unordered pairs of `n >= 2` items.
pub fn mean_pairwise(n: usize, mut distance: impl FnMut(usize, usize) -> Result<f64>) -> Result<f64> {
    if n < 2 {
        return Err(Error::validation(format!("diversity needs at least 2 items, got {n}")));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            sum += distance(i, j)?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean pairwise perceptual distance among counterfactuals (`[C, H, W]`
/// each).
pub fn diversity(images: &[Tensor], distance: &PerceptualDistance) -> Result<f64> {
    mean_pairwise(images.len(), |i, j| distance.distance(&images[i], &images[j]))
}

/// Number of pairwise-distinct images (exact pixel comparison).
pub fn distinct_count(images: &[Tensor]) -> Result<usize> {
    let mut seen: Vec<Vec<u32>> = Vec::new();
    for img in images {
        let bits: Vec<u32> = img.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?.iter().map(|v| v.to_bits()).collect();
        if !seen.contains(&bits) {
            seen.push(bits);
        }
    }
    Ok(seen.len())
}
