//! Builtin two-class benchmark: 32x32 grayscale images holding one bright
//! arc whose bend direction is the class ("frown" bends up in the middle,
//! "smile" bends down), on a shaded background with a class-independent
//! distractor square.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::zoo::dataset::{Dataset, DatasetDescriptor, Provenance};

pub const GEOMETRY: Geometry = Geometry::new(1, 32, 32);
pub const CLASS_NAMES: [&str; 2] = ["frown", "smile"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { train: 2000, test: 200, seed: 2023 }
    }
}

/// Renders one image with the given label.
pub fn render(label: usize, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = (GEOMETRY.height, GEOMETRY.width);
    let bg: f32 = rng.random_range(-0.9..-0.5);
    let gx: f32 = rng.random_range(-0.15..0.15);
    let gy: f32 = rng.random_range(-0.15..0.15);
    let mut img = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = bg + gx * (x as f32 - 15.5) / 16.0 + gy * (y as f32 - 15.5) / 16.0;
        }
    }

    let side = rng.random_range(3..=5usize);
    let (sx, sy) = (rng.random_range(0..=w - side), rng.random_range(0..=h - side));
    let level: f32 = rng.random_range(-0.2..0.5);
    for y in sy..sy + side {
        for x in sx..sx + side {
            img[y * w + x] = level;
        }
    }

    let cx: f32 = rng.random_range(11.0..21.0);
    let cy: f32 = rng.random_range(12.0..20.0);
    let half: f32 = rng.random_range(6.0..9.0);
    let depth: f32 = rng.random_range(3.5..6.0);
    let intensity: f32 = rng.random_range(0.5..0.95);
    let width: f32 = rng.random_range(0.7..1.0);
    let bend = if label == 1 { 1.0 } else { -1.0 };
    let curve: Vec<(f32, f32)> = (0..=64)
        .map(|i| {
            let u = -1.0 + 2.0 * i as f32 / 64.0;
            (cx + u * half, cy + bend * depth * (0.5 - u * u))
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let d2 = curve
                .iter()
                .map(|&(px, py)| (px - x as f32).powi(2) + (py - y as f32).powi(2))
                .fold(f32::INFINITY, f32::min);
            let a = (-d2 / (2.0 * width * width)).exp();
            let v = &mut img[y * w + x];
            *v = *v * (1.0 - a) + intensity * a;
        }
    }

    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
    }
    img
}

/// Generates the benchmark with balanced labels in both splits.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    let n = config.train + config.test;
    if n == 0 {
        return Err(Error::validation("synthetic dataset needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data = Vec::with_capacity(n * GEOMETRY.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        data.extend(render(label, &mut rng));
        labels.push(label);
    }
    let images = Tensor::from_vec(data, (n, GEOMETRY.channels, GEOMETRY.height, GEOMETRY.width), &Device::Cpu)?;
    let splits: BTreeMap<String, Vec<usize>> = [
        ("train".to_string(), (0..config.train).collect()),
        ("test".to_string(), (config.train..n).collect()),
    ]
    .into();
    let descriptor = DatasetDescriptor {
        name: "arcs".into(),
        geometry: GEOMETRY,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        split_sizes: BTreeMap::new(),
        provenance: Provenance::BuiltinSynthetic { seed: config.seed },
    };
    let ids = (0..n).map(|i| format!("arc-{i:05}")).collect();
    Dataset::new(descriptor, images, labels, ids, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_in_range() {
        let cfg = SyntheticConfig { train: 6, test: 4, seed: 1 };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let va = a.images.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, b.images.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.descriptor.split_sizes["train"], 6);
        assert_eq!(a.split("test").unwrap().1, vec![0, 1, 0, 1]);
    }
}
