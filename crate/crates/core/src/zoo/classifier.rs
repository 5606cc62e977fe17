use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AssetKind};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::nn::{self, Linear, ParamSpec, Weights};
use crate::zoo::dataset::Dataset;

/// The model under explanation: a fixed, differentiable map from images to
/// class logits. Nothing downstream may update its weights.
pub trait Classifier: Send + Sync {
    fn geometry(&self) -> Geometry;

    fn num_classes(&self) -> usize;

    /// Logits `[B, num_classes]` for a `[B, C, H, W]` batch.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;

    fn label_names(&self) -> Vec<String> {
        (0..self.num_classes()).map(|i| format!("class_{i}")).collect()
    }
}

/// Softmax probabilities `[B, C]`.
pub fn predict_probs(classifier: &dyn Classifier, batch: &Tensor) -> Result<Tensor> {
    classifier.geometry().check_batch(batch)?;
    Ok(candle_nn::ops::softmax(&classifier.logits(batch)?, D::Minus1)?)
}

/// Probability rows as `f64` vectors.
pub fn probs_rows(classifier: &dyn Classifier, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(predict_probs(classifier, batch)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

/// Predicted labels for a batch.
pub fn predict_labels(classifier: &dyn Classifier, batch: &Tensor) -> Result<Vec<usize>> {
    Ok(probs_rows(classifier, batch)?.iter().map(|r| argmax(r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    /// Side of the non-overlapping patches of the strided input convolution.
    pub patch: usize,
    /// Channels produced per patch.
    pub embed: usize,
    pub hidden: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { patch: 4, embed: 16, hidden: 64 }
    }
}

impl ClassifierArch {
    fn tokens(&self, g: Geometry) -> usize {
        (g.height / self.patch) * (g.width / self.patch)
    }

    fn check(&self, g: Geometry) -> Result<()> {
        if self.patch == 0 || g.height % self.patch != 0 || g.width % self.patch != 0 {
            return Err(Error::config(format!("patch size {} does not tile a {g} image", self.patch)));
        }
        Ok(())
    }

    pub(crate) fn param_specs(&self, g: Geometry, classes: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        specs.extend(ParamSpec::linear("patch", g.channels * self.patch * self.patch, self.embed));
        specs.extend(ParamSpec::linear("hidden", self.tokens(g) * self.embed, self.hidden));
        specs.extend(ParamSpec::linear("head", self.hidden, classes));
        specs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHeader {
    pub arch: ClassifierArch,
    pub geometry: Geometry,
    pub label_names: Vec<String>,
    pub held_out_accuracy: Option<f64>,
}

/// Strided patch convolution followed by a two-layer head.
#[derive(Clone)]
pub struct PatchClassifier {
    header: ClassifierHeader,
    patch: Linear,
    hidden: Linear,
    head: Linear,
    weights: Weights,
}

impl PatchClassifier {
    pub fn from_weights(header: ClassifierHeader, weights: Weights) -> Result<Self> {
        let (a, g) = (&header.arch, header.geometry);
        a.check(g)?;
        if header.label_names.len() < 2 {
            return Err(Error::validation("a classifier needs at least two classes"));
        }
        Ok(Self {
            patch: Linear::load(&weights, "patch", g.channels * a.patch * a.patch, a.embed)?,
            hidden: Linear::load(&weights, "hidden", a.tokens(g) * a.embed, a.hidden)?,
            head: Linear::load(&weights, "head", a.hidden, header.label_names.len())?,
            header,
            weights,
        })
    }

    pub fn random(arch: ClassifierArch, geometry: Geometry, label_names: Vec<String>, seed: u64, dtype: DType) -> Result<Self> {
        arch.check(geometry)?;
        let weights = nn::init_weights(&arch.param_specs(geometry, label_names.len()), seed, dtype)?;
        Self::from_weights(ClassifierHeader { arch, geometry, label_names, held_out_accuracy: None }, weights)
    }

    pub fn header(&self) -> &ClassifierHeader {
        &self.header
    }

    pub fn held_out_accuracy(&self) -> Option<f64> {
        self.header.held_out_accuracy
    }

    /// Intermediate activations: patch tokens `[B, T, E]` and hidden `[B, H]`.
    pub fn activations(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.header.geometry.check_batch(images)?;
        let patches = nn::patchify(images, self.header.arch.patch)?;
        let (_, t, p) = patches.dims3()?;
        let tokens = self.patch.forward(&patches.reshape((b * t, p))?)?.silu()?;
        let hidden = self.hidden.forward(&tokens.reshape((b, ()))?)?.silu()?;
        Ok((tokens.reshape((b, t, ()))?, hidden))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, AssetKind::Classifier, &self.header, &self.weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = checkpoint::load(path)?;
        archive.expect_kind(AssetKind::Classifier)?;
        let header = archive.header_as()?;
        Self::from_weights(header, archive.tensors)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let weights = self
            .weights
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<Weights>>()?;
        Self::from_weights(self.header.clone(), weights)
    }
}

impl Classifier for PatchClassifier {
    fn geometry(&self) -> Geometry {
        self.header.geometry
    }

    fn num_classes(&self) -> usize {
        self.header.label_names.len()
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (_, hidden) = self.activations(images)?;
        self.head.forward(&hidden).map_err(Into::into)
    }

    fn label_names(&self) -> Vec<String> {
        self.header.label_names.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            epochs: 15,
            batch_size: 64,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Cross-entropy of `logits` against integer `labels`, one value per row.
pub(crate) fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let classes = logits.dim(D::Minus1)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (labels.len(), 1), &Device::Cpu)?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(logp.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

/// Accuracy of `classifier` on a labelled batch.
pub fn accuracy(classifier: &dyn Classifier, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    let n = labels.len();
    let chunk = 256;
    for start in (0..n).step_by(chunk) {
        let len = chunk.min(n - start);
        let pred = predict_labels(classifier, &images.narrow(0, start, len)?)?;
        correct += pred.iter().zip(&labels[start..start + len]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / n as f64)
}

/// Trains the patch classifier on the dataset's `train` split and records
/// its accuracy on the `test` split.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierTrainConfig) -> Result<PatchClassifier> {
    let (images, labels) = dataset.split("train")?;
    let classes = dataset.descriptor.class_names.len();
    if labels.is_empty() {
        return Err(Error::validation("cannot train a classifier on an empty dataset"));
    }
    let present: std::collections::BTreeSet<_> = labels.iter().collect();
    if classes < 2 || present.len() < 2 {
        return Err(Error::validation("a classifier needs labelled examples of at least two classes"));
    }
    let geometry = dataset.descriptor.geometry;
    config.arch.check(geometry)?;
    let dtype = images.dtype();
    let init = nn::init_weights(&config.arch.param_specs(geometry, classes), config.seed, dtype)?;
    let vars = nn::to_vars(&init)?;
    let header = ClassifierHeader {
        arch: config.arch.clone(),
        geometry,
        label_names: dataset.descriptor.class_names.clone(),
        held_out_accuracy: None,
    };
    let model = PatchClassifier::from_weights(header.clone(), nn::var_weights(&vars))?;
    let mut opt = AdamW::new(
        vars.values().cloned().collect(),
        ParamsAdamW { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let idx: Vec<u32> = batch.iter().map(|&i| i as u32).collect();
            let x = images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy_rows(&model.logits(&x)?, &y)?.mean_all()?;
            opt.set_learning_rate(crate::diffusion::lr_at(config.learning_rate, step, total));
            opt.backward_step(&loss)?;
            step += 1;
        }
    }
    let mut trained = PatchClassifier::from_weights(header, nn::freeze(&vars)?)?;
    let (test_x, test_y) = dataset.split("test")?;
    if !test_y.is_empty() {
        trained.header.held_out_accuracy = Some(accuracy(&trained, &test_x, &test_y)?);
    }
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Tensor);

    impl Classifier for Fixed {
        fn geometry(&self) -> Geometry {
            Geometry::new(1, 1, 2)
        }
        fn num_classes(&self) -> usize {
            self.0.dim(1).unwrap()
        }
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            let b = images.dim(0)?;
            Ok(self.0.broadcast_as((b, self.num_classes()))?.contiguous()?)
        }
    }

    fn batch(b: usize) -> Tensor {
        Tensor::zeros((b, 1, 1, 2), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_of_two_and_zero() {
        let c = Fixed(Tensor::new(&[[2.0f64, 0.0]], &Device::Cpu).unwrap());
        let p = probs_rows(&c, &batch(1)).unwrap();
        // 1 / (1 + e^-2) evaluated independently.
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p[0][0] - expected).abs() < 1e-12);
        assert!((p[0][0] - 0.8808).abs() < 1e-4 && (p[0][1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let c = Fixed(Tensor::new(&[[0.3f64, 0.3, 0.3, 0.3]], &Device::Cpu).unwrap());
        for row in probs_rows(&c, &batch(3)).unwrap() {
            for p in row {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let c = Fixed(Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap());
        let wrong = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(predict_probs(&c, &wrong), Err(Error::Validation(_))));
    }

    #[test]
    fn cross_entropy_rows_checks_labels() {
        let logits = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).unwrap();
        let ce = cross_entropy_rows(&logits, &[1]).unwrap().to_vec1::<f64>().unwrap();
        assert!((ce[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(cross_entropy_rows(&logits, &[2]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 2..6)) {
            let k = logits.len();
            let c = Fixed(Tensor::from_vec(logits, (1, k), &Device::Cpu).unwrap());
            let rows = probs_rows(&c, &batch(2)).unwrap();
            for row in rows {
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}
