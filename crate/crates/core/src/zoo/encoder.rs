//! Feature encoders used by the evaluation metrics, and the perceptual
//! distance built on their intermediate activations.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AssetKind};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::nn::{self, Linear, ParamSpec, Weights};
use crate::zoo::classifier::PatchClassifier;
use crate::zoo::dataset::Dataset;

/// Maps an image batch `[B, C, H, W]` to feature vectors `[B, D]`.
pub trait FeatureEncoder: Send + Sync {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn encode(&self, images: &Tensor) -> Result<Tensor>;
}

/// An encoder exposing intermediate activations, each shaped
/// `[B, positions, channels]`.
pub trait LayeredEncoder: Send + Sync {
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Raw pixels as features.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEncoder {
    pub geometry: Geometry,
}

impl FeatureEncoder for IdentityEncoder {
    fn name(&self) -> String {
        "identity".into()
    }

    fn dim(&self) -> usize {
        self.geometry.numel()
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.geometry.check_batch(images)?;
        Ok(images.flatten_from(1)?)
    }
}

impl LayeredEncoder for IdentityEncoder {
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let b = self.geometry.check_batch(images)?;
        let g = self.geometry;
        Ok(vec![images.reshape((b, g.channels, g.pixels()))?.transpose(1, 2)?.contiguous()?])
    }
}

/// Penultimate activations of a trained classifier.
impl FeatureEncoder for PatchClassifier {
    fn name(&self) -> String {
        "supervised".into()
    }

    fn dim(&self) -> usize {
        self.header().arch.hidden
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.activations(images)?.1)
    }
}

impl LayeredEncoder for PatchClassifier {
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (tokens, hidden) = self.activations(images)?;
        Ok(vec![tokens, hidden.unsqueeze(1)?])
    }
}

/// Learned-feature image distance: activations are unit-normalised along
/// the channel axis, squared differences are summed over channels, averaged
/// over positions, and summed over layers.
#[derive(Clone)]
pub struct PerceptualDistance {
    encoder: Arc<dyn LayeredEncoder>,
}

impl PerceptualDistance {
    pub fn new(encoder: Arc<dyn LayeredEncoder>) -> Self {
        Self { encoder }
    }

    /// Distances between matching rows of two `[B, C, H, W]` batches.
    pub fn rows(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        if a.dims() != b.dims() {
            return Err(Error::validation(format!("batch shapes {:?} and {:?} differ", a.dims(), b.dims())));
        }
        let la = self.encoder.layers(a)?;
        let lb = self.encoder.layers(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in la.iter().zip(&lb) {
            let (x, y) = (x.to_dtype(DType::F64)?, y.to_dtype(DType::F64)?);
            let d = (unit(&x)? - unit(&y)?)?.sqr()?.sum(D::Minus1)?.mean(D::Minus1)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        let total = total.ok_or_else(|| Error::validation("encoder produced no layers"))?;
        Ok(total.to_vec1::<f64>()?)
    }

    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        Ok(self.rows(&a.unsqueeze(0)?, &b.unsqueeze(0)?)?[0])
    }
}

fn unit(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + 1e-10)?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub patch: usize,
    pub embed: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self { patch: 4, embed: 16, hidden: 128, output: 64 }
    }
}

impl EncoderArch {
    fn check(&self, g: Geometry) -> Result<()> {
        if self.patch == 0 || g.height % self.patch != 0 || g.width % self.patch != 0 {
            return Err(Error::config(format!("patch size {} does not tile a {g} image", self.patch)));
        }
        Ok(())
    }

    fn param_specs(&self, g: Geometry) -> Vec<ParamSpec> {
        let tokens = (g.height / self.patch) * (g.width / self.patch);
        let mut specs = Vec::new();
        specs.extend(ParamSpec::linear("patch", g.channels * self.patch * self.patch, self.embed));
        specs.extend(ParamSpec::linear("hidden", tokens * self.embed, self.hidden));
        specs.extend(ParamSpec::linear("project", self.hidden, self.output));
        specs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderHeader {
    pub arch: EncoderArch,
    pub geometry: Geometry,
    pub objective: String,
}

/// Encoder trained without labels to map augmented views of one image close
/// together and views of different images apart.
pub struct ContrastiveEncoder {
    header: EncoderHeader,
    patch: Linear,
    hidden: Linear,
    project: Linear,
    weights: Weights,
}

impl ContrastiveEncoder {
    pub fn from_weights(header: EncoderHeader, weights: Weights) -> Result<Self> {
        let (a, g) = (&header.arch, header.geometry);
        a.check(g)?;
        let tokens = (g.height / a.patch) * (g.width / a.patch);
        Ok(Self {
            patch: Linear::load(&weights, "patch", g.channels * a.patch * a.patch, a.embed)?,
            hidden: Linear::load(&weights, "hidden", tokens * a.embed, a.hidden)?,
            project: Linear::load(&weights, "project", a.hidden, a.output)?,
            header,
            weights,
        })
    }

    pub fn header(&self) -> &EncoderHeader {
        &self.header
    }

    fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let b = self.header.geometry.check_batch(images)?;
        let patches = nn::patchify(images, self.header.arch.patch)?;
        let (_, t, p) = patches.dims3()?;
        let tokens = self.patch.forward(&patches.reshape((b * t, p))?)?.silu()?;
        let hidden = self.hidden.forward(&tokens.reshape((b, ()))?)?.silu()?;
        let out = self.project.forward(&hidden)?;
        Ok((tokens.reshape((b, t, ()))?, hidden, out))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, AssetKind::Encoder, &self.header, &self.weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = checkpoint::load(path)?;
        archive.expect_kind(AssetKind::Encoder)?;
        let header = archive.header_as()?;
        Self::from_weights(header, archive.tensors)
    }
}

impl FeatureEncoder for ContrastiveEncoder {
    fn name(&self) -> String {
        "self-supervised".into()
    }

    fn dim(&self) -> usize {
        self.header.arch.output
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.2)
    }
}

impl LayeredEncoder for ContrastiveEncoder {
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (tokens, hidden, _) = self.forward(images)?;
        Ok(vec![tokens, hidden.unsqueeze(1)?])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub arch: EncoderArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self { arch: EncoderArch::default(), epochs: 10, batch_size: 128, learning_rate: 2e-3, temperature: 0.2, seed: 0 }
    }
}

/// Random shift (edge-replicated), contrast and brightness jitter, and pixel
/// noise.
fn augment(image: &[f32], g: Geometry, rng: &mut impl Rng) -> Vec<f32> {
    let max_shift = (g.height.min(g.width) / 8) as i64;
    let dx = rng.random_range(-max_shift..=max_shift);
    let dy = rng.random_range(-max_shift..=max_shift);
    let flip = rng.random_bool(0.5);
    let scale: f32 = rng.random_range(0.8..1.2);
    let offset: f32 = rng.random_range(-0.1..0.1);
    let noise = Normal::new(0.0f32, 0.05).expect("valid std");
    let (h, w) = (g.height as i64, g.width as i64);
    let mut out = Vec::with_capacity(image.len());
    for c in 0..g.channels {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let sx = (sx - dx).clamp(0, w - 1);
                let sy = (y - dy).clamp(0, h - 1);
                let v = image[c * g.pixels() + (sy * w + sx) as usize];
                out.push((v * scale + offset + noise.sample(rng)).clamp(-1.0, 1.0));
            }
        }
    }
    out
}

/// Normalised-temperature cross-entropy over a batch holding two views of
/// each image (`z` rows `i` and `i + n` are a positive pair).
fn contrastive_loss(z: &Tensor, temperature: f64) -> Result<Tensor> {
    let two_n = z.dim(0)?;
    let n = two_n / 2;
    let z = unit(z)?;
    let sim = (z.matmul(&z.t()?)? / temperature)?;
    let eye = Tensor::eye(two_n, sim.dtype(), &Device::Cpu)?;
    let sim = (sim - (eye * 1e9)?)?;
    let targets: Vec<u32> = (0..two_n).map(|i| ((i + n) % two_n) as u32).collect();
    let targets = Tensor::from_vec(targets, (two_n, 1), &Device::Cpu)?;
    let logp = candle_nn::ops::log_softmax(&sim, D::Minus1)?;
    Ok(logp.gather(&targets, 1)?.neg()?.mean_all()?)
}

/// Trains a [`ContrastiveEncoder`] on the `train` split without using
/// labels.
pub fn train_contrastive_encoder(dataset: &Dataset, config: &EncoderTrainConfig) -> Result<ContrastiveEncoder> {
    let (images, _) = dataset.split("train")?;
    let n = images.dim(0)?;
    if n < 2 {
        return Err(Error::validation("contrastive training needs at least two images"));
    }
    if config.batch_size < 2 || config.epochs == 0 {
        return Err(Error::config("contrastive training needs batch_size >= 2 and epochs >= 1"));
    }
    let g = dataset.descriptor.geometry;
    config.arch.check(g)?;
    let data = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = g.numel();
    let init = nn::init_weights(&config.arch.param_specs(g), config.seed, DType::F32)?;
    let vars = nn::to_vars(&init)?;
    let header = EncoderHeader { arch: config.arch.clone(), geometry: g, objective: "nt-xent".into() };
    let model = ContrastiveEncoder::from_weights(header.clone(), nn::var_weights(&vars))?;
    let mut opt = AdamW::new(
        vars.values().cloned().collect(),
        ParamsAdamW { lr: config.learning_rate, weight_decay: 1e-4, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            let mut views = Vec::with_capacity(2 * batch.len() * per);
            for _ in 0..2 {
                for &i in batch {
                    views.extend(augment(&data[i * per..(i + 1) * per], g, &mut rng));
                }
            }
            let x = Tensor::from_vec(views, (2 * batch.len(), g.channels, g.height, g.width), &Device::Cpu)?;
            let loss = contrastive_loss(&model.encode(&x)?, config.temperature)?;
            opt.set_learning_rate(crate::diffusion::lr_at(config.learning_rate, step, total));
            opt.backward_step(&loss)?;
            step += 1;
        }
    }
    ContrastiveEncoder::from_weights(header, nn::freeze(&vars)?)
}

/// A metric encoder loaded from disk: either a classifier checkpoint (its
/// penultimate features) or a contrastive encoder checkpoint.
pub enum EncoderAsset {
    Supervised(PatchClassifier),
    SelfSupervised(ContrastiveEncoder),
}

impl EncoderAsset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = checkpoint::load(path)?;
        match archive.kind {
            AssetKind::Classifier => {
                Ok(Self::Supervised(PatchClassifier::from_weights(archive.header_as()?, archive.tensors)?))
            }
            AssetKind::Encoder => {
                Ok(Self::SelfSupervised(ContrastiveEncoder::from_weights(archive.header_as()?, archive.tensors)?))
            }
            other => Err(Error::Checkpoint {
                path: archive.path,
                reason: format!("a {} checkpoint cannot serve as a feature encoder", other.as_str()),
            }),
        }
    }

    fn inner(&self) -> (&dyn FeatureEncoder, &dyn LayeredEncoder) {
        match self {
            Self::Supervised(c) => (c, c),
            Self::SelfSupervised(e) => (e, e),
        }
    }
}

impl FeatureEncoder for EncoderAsset {
    fn name(&self) -> String {
        self.inner().0.name()
    }

    fn dim(&self) -> usize {
        self.inner().0.dim()
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.inner().0.encode(images)
    }
}

impl LayeredEncoder for EncoderAsset {
    fn layers(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.inner().1.layers(images)
    }
}
