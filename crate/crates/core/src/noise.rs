//! Seeded Gaussian noise, one independent stream per batch instance.
//!
//! Each instance of a batch owns its own generator, so the noise an instance
//! sees does not depend on which other instances share its batch.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Stream used by the attack loop.
pub const ATTACK_STREAM: u64 = 1;
/// Stream used by mask-constrained refinement.
pub const REFINE_STREAM: u64 = 2;
/// Stream used for the final evaluation of a pre-explanation.
pub const PROBE_STREAM: u64 = 3;

pub struct NoiseRng {
    streams: Vec<ChaCha8Rng>,
}

impl NoiseRng {
    pub fn new(seeds: &[u64], stream: u64) -> Self {
        let streams = seeds
            .iter()
            .map(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                rng
            })
            .collect();
        Self { streams }
    }

    pub fn single(seed: u64, stream: u64) -> Self {
        Self::new(&[seed], stream)
    }

    pub fn batch_size(&self) -> usize {
        self.streams.len()
    }

    /// Draws a standard normal `[B, C, H, W]` tensor, `B` being the number of
    /// streams.
    pub fn sample(&mut self, per_instance: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
        let (c, h, w) = per_instance;
        let n = c * h * w;
        let b = self.streams.len();
        let tensor = match dtype {
            DType::F64 => {
                let mut data = Vec::with_capacity(b * n);
                for rng in &mut self.streams {
                    data.extend((0..n).map(|_| -> f64 { StandardNormal.sample(rng) }));
                }
                Tensor::from_vec(data, (b, c, h, w), &Device::Cpu)?
            }
            DType::F32 => {
                let mut data = Vec::with_capacity(b * n);
                for rng in &mut self.streams {
                    data.extend((0..n).map(|_| -> f32 { StandardNormal.sample(rng) }));
                }
                Tensor::from_vec(data, (b, c, h, w), &Device::Cpu)?
            }
            other => return Err(Error::validation(format!("unsupported noise dtype {other:?}"))),
        };
        Ok(tensor)
    }

    /// Draws noise shaped like `like` (which must be `[B, C, H, W]`).
    pub fn sample_like(&mut self, like: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = like.dims4()?;
        if b != self.streams.len() {
            return Err(Error::validation(format!(
                "noise generator holds {} streams but the batch has {b} instances",
                self.streams.len()
            )));
        }
        self.sample((c, h, w), like.dtype())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_noise_is_independent_of_batch_composition() {
        let mut batch = NoiseRng::new(&[7, 11], ATTACK_STREAM);
        let mut alone = NoiseRng::single(11, ATTACK_STREAM);
        let a = batch.sample((1, 3, 3), DType::F32).unwrap();
        let b = alone.sample((1, 3, 3), DType::F32).unwrap();
        let second = a.get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(second, b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn streams_differ() {
        let a = NoiseRng::single(3, ATTACK_STREAM).sample((1, 2, 2), DType::F64).unwrap();
        let b = NoiseRng::single(3, REFINE_STREAM).sample((1, 2, 2), DType::F64).unwrap();
        assert_ne!(
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }
}
