use candle_core::{DType, Tensor};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::gaussian::{frechet_distance, GaussianStats};
use crate::zoo::FeatureEncoder;

const ENCODE_CHUNK: usize = 256;

/// Encodes `[N, C, H, W]` images into an `N x D` matrix.
pub fn encode_all(images: &Tensor, encoder: &dyn FeatureEncoder) -> Result<DMatrix<f64>> {
    let n = images.dim(0)?;
    let d = encoder.dim();
    let mut rows = Vec::with_capacity(n * d);
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let len = ENCODE_CHUNK.min(n - start);
        let f = encoder.encode(&images.narrow(0, start, len)?)?.to_dtype(DType::F64)?;
        let (m, k) = f.dims2()?;
        if m != len || k != d {
            return Err(Error::validation(format!("encoder `{}` returned {m}x{k} features, expected {len}x{d}", encoder.name())));
        }
        rows.extend(f.flatten_all()?.to_vec1::<f64>()?);
    }
    Ok(DMatrix::from_row_slice(n, d, &rows))
}

/// Frechet distance between the encoded feature distributions of two image
/// sets.
pub fn fid(set_a: &Tensor, set_b: &Tensor, encoder: &dyn FeatureEncoder) -> Result<f64> {
    for (name, set) in [("first", set_a), ("second", set_b)] {
        let n = set.dim(0)?;
        if n < 2 {
            return Err(Error::validation(format!("{name} image set has {n} images; at least 2 are needed")));
        }
    }
    let a = GaussianStats::fit(&encode_all(set_a, encoder)?)?;
    let b = GaussianStats::fit(&encode_all(set_b, encoder)?)?;
    frechet_distance(&a, &b)
}

/// Per-split values of the split protocol and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfidResult {
    pub mean: f64,
    pub per_split: Vec<f64>,
    /// Instances of each generated half whose counterfactual was invalid.
    pub excluded: Vec<usize>,
}

/// Split FID. For each seeded random split into disjoint halves A and B,
/// counterfactuals are generated for A and compared with the raw images of
/// B. `generate` receives indices into `images` and returns one optional
/// counterfactual `[C, H, W]` per index; `None` marks an invalid one, which
/// is left out of that split's FID.
pub fn sfid(
    images: &Tensor,
    generate: &mut dyn FnMut(&[usize]) -> Result<Vec<Option<Tensor>>>,
    encoder: &dyn FeatureEncoder,
    num_splits: usize,
    seed: u64,
) -> Result<SfidResult> {
    let n = images.dim(0)?;
    if n < 4 {
        return Err(Error::validation(format!("split FID needs at least 4 images, got {n}")));
    }
    if num_splits == 0 {
        return Err(Error::validation("split FID needs at least one split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_split = Vec::with_capacity(num_splits);
    let mut excluded = Vec::with_capacity(num_splits);
    for split in 0..num_splits {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (half_a, half_b) = order.split_at(n / 2);
        let generated = generate(half_a)?;
        if generated.len() != half_a.len() {
            return Err(Error::validation(format!(
                "generator returned {} results for {} instances",
                generated.len(),
                half_a.len()
            )));
        }
        let valid: Vec<Tensor> = generated.into_iter().flatten().collect();
        let dropped = half_a.len() - valid.len();
        if dropped > 0 {
            tracing::info!(split, dropped, "invalid counterfactuals left out of split FID");
        }
        if valid.len() < 2 {
            return Err(Error::validation(format!("split {split}: fewer than 2 valid counterfactuals")));
        }
        let idx: Vec<u32> = half_b.iter().map(|&i| i as u32).collect();
        let raw_b = images.index_select(&Tensor::new(idx.as_slice(), images.device())?, 0)?;
        let ce_a = Tensor::stack(&valid, 0)?.to_dtype(images.dtype())?;
        per_split.push(fid(&ce_a, &raw_b, encoder)?);
        excluded.push(dropped);
    }
    let mean = per_split.iter().sum::<f64>() / per_split.len() as f64;
    Ok(SfidResult { mean, per_split, excluded })
}
