use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::zoo::{probs_rows, Classifier};

/// Pixel indices ordered by decreasing channel-summed `|x - x_ce|`, ties by
/// position.
fn ranked_pixels(x: &[f64], x_ce: &[f64], channels: usize, plane: usize) -> Vec<usize> {
    let mut score = vec![0.0f64; plane];
    for c in 0..channels {
        for p in 0..plane {
            score[p] += (x[c * plane + p] - x_ce[c * plane + p]).abs();
        }
    }
    let mut order: Vec<usize> = (0..plane).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]));
    order
}

/// The insertion sequence `x^0 = x, ..., x^K = x_ce` (`[K + 1, C, H, W]`):
/// step `k` copies the first `k` of `K` equal pixel batches in rank order,
/// the last batch absorbing the remainder.
pub fn transition_sequence(x: &Tensor, x_ce: &Tensor, num_steps: usize) -> Result<Tensor> {
    if num_steps == 0 {
        return Err(Error::validation("the transition needs at least one step"));
    }
    if x.dims() != x_ce.dims() {
        return Err(Error::validation(format!("shapes {:?} and {:?} differ", x.dims(), x_ce.dims())));
    }
    let (c, h, w) = x.dims3()?;
    let plane = h * w;
    let a = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let b = x_ce.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let order = ranked_pixels(&a, &b, c, plane);
    let size = plane / num_steps;
    let mut current = a.clone();
    let mut frames = current.clone();
    for k in 1..=num_steps {
        let end = if k == num_steps { plane } else { k * size };
        for &p in &order[(k - 1) * size..end] {
            for ch in 0..c {
                current[ch * plane + p] = b[ch * plane + p];
            }
        }
        frames.extend_from_slice(&current);
    }
    Ok(Tensor::from_vec(frames, (num_steps + 1, c, h, w), &Device::Cpu)?.to_dtype(x.dtype())?)
}

/// Difference between the mean target and mean source probability along
/// the insertion sequence from `x` to `x_ce`.
pub fn cout(
    x: &Tensor,
    x_ce: &Tensor,
    classifier: &dyn Classifier,
    source: usize,
    target: usize,
    num_steps: usize,
) -> Result<f64> {
    if source == target {
        return Err(Error::validation("source and target labels must differ"));
    }
    let classes = classifier.num_classes();
    if source >= classes || target >= classes {
        return Err(Error::validation(format!("labels {source}, {target} out of range for {classes} classes")));
    }
    let frames = transition_sequence(x, x_ce, num_steps)?;
    let probs = probs_rows(classifier, &frames)?;
    let k1 = probs.len() as f64;
    let auc_target = probs.iter().map(|p| p[target]).sum::<f64>() / k1;
    let auc_source = probs.iter().map(|p| p[source]).sum::<f64>() / k1;
    Ok((auc_target - auc_source).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_starts_at_input_and_ends_at_counterfactual() {
        let x = Tensor::zeros((1, 2, 3), DType::F32, &Device::Cpu).unwrap();
        let ce = Tensor::new(&[[[0.6f32, 0.1, 0.5], [0.4, 0.3, 0.2]]], &Device::Cpu).unwrap();
        let s = transition_sequence(&x, &ce, 4).unwrap();
        assert_eq!(s.dims(), &[5, 1, 2, 3]);
        let rows: Vec<Vec<f32>> = (0..5).map(|k| s.get(k).unwrap().flatten_all().unwrap().to_vec1().unwrap()).collect();
        assert_eq!(rows[0], vec![0.0; 6]);
        assert_eq!(rows[1], vec![0.6, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(rows[2], vec![0.6, 0.0, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(rows[4], ce.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
