use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::fid::encode_all;
use crate::zoo::FeatureEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub mean: f64,
    pub pairs: usize,
    /// Pairs left out because an embedding had zero norm.
    pub excluded: usize,
}

/// Mean cosine similarity of matching feature rows; pairs with a zero-norm
/// row are excluded and counted.
pub fn mean_cosine(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> Result<SimilarityResult> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!("feature shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        let (na, nb) = (ra.norm(), rb.norm());
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        sum += ra.dot(&rb) / (na * nb);
        used += 1;
    }
    let excluded = a.nrows() - used;
    if excluded > 0 {
        tracing::warn!(excluded, "zero-norm embeddings left out of the similarity");
    }
    if used == 0 {
        return Err(Error::validation("no pair has two non-zero embeddings"));
    }
    Ok(SimilarityResult { mean: sum / used as f64, pairs: used, excluded })
}

/// Mean cosine similarity between the embeddings of inputs and their
/// counterfactuals (`[N, C, H, W]` each).
pub fn embedding_similarity(inputs: &Tensor, counterfactuals: &Tensor, encoder: &dyn FeatureEncoder) -> Result<SimilarityResult> {
    if inputs.dims() != counterfactuals.dims() {
        return Err(Error::validation("input and counterfactual batches differ in shape"));
    }
    if inputs.dim(0)? == 0 {
        return Err(Error::validation("similarity of an empty set of pairs"));
    }
    mean_cosine(&encode_all(inputs, encoder)?, &encode_all(counterfactuals, encoder)?)
}
