use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AssetKind};
use crate::error::{Error, Result};
use crate::image::Geometry;
use crate::nn::Weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    BuiltinSynthetic { seed: u64 },
    IngestedDirectory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub geometry: Geometry,
    pub class_names: Vec<String>,
    pub split_sizes: BTreeMap<String, usize>,
    pub provenance: Provenance,
}

/// Labelled images with disjoint named splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    /// `[N, C, H, W]` in the internal range.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Per-image identifier (file name for ingested data).
    pub ids: Vec<String>,
    splits: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    descriptor: DatasetDescriptor,
    labels: Vec<usize>,
    ids: Vec<String>,
    splits: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        descriptor: DatasetDescriptor,
        images: Tensor,
        labels: Vec<usize>,
        ids: Vec<String>,
        splits: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let n = descriptor.geometry.check_batch(&images)?;
        if labels.len() != n || ids.len() != n {
            return Err(Error::validation(format!(
                "{n} images but {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        let classes = descriptor.class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
        }
        let mut seen = vec![false; n];
        for (name, idx) in &splits {
            for &i in idx {
                if i >= n {
                    return Err(Error::validation(format!("split `{name}` references image {i} of {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::validation(format!("image {i} appears in more than one split")));
                }
            }
        }
        let mut descriptor = descriptor;
        descriptor.split_sizes = splits.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        Ok(Self { descriptor, images, labels, ids, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(String::as_str)
    }

    /// Indices of a split into the full image tensor.
    pub fn split_indices(&self, split: &str) -> Result<&[usize]> {
        self.splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::NotFound(format!("split `{split}` of dataset `{}`", self.descriptor.name)))
    }

    /// Images and labels of a split.
    pub fn split(&self, split: &str) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.split_indices(split)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        if idx.is_empty() {
            let g = self.descriptor.geometry;
            let empty = Tensor::zeros((0, g.channels, g.height, g.width), self.images.dtype(), &Device::Cpu)?;
            return Ok((empty, labels));
        }
        let sel: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let images = self.images.index_select(&Tensor::new(sel.as_slice(), &Device::Cpu)?, 0)?;
        Ok((images, labels))
    }

    /// One image (`[C, H, W]`) and its label, addressed within a split.
    pub fn instance(&self, split: &str, index: usize) -> Result<(Tensor, usize)> {
        let idx = self.split_indices(split)?;
        let &i = idx.get(index).ok_or_else(|| {
            Error::NotFound(format!("instance {index} of split `{split}` ({} instances)", idx.len()))
        })?;
        Ok((self.images.get(i)?, self.labels[i]))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DatasetHeader {
            descriptor: self.descriptor.clone(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            splits: self.splits.clone(),
        };
        let tensors: Weights = [("images".to_string(), self.images.clone())].into();
        checkpoint::save(path, AssetKind::Dataset, &header, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut archive = checkpoint::load(path)?;
        archive.expect_kind(AssetKind::Dataset)?;
        let header: DatasetHeader = archive.header_as()?;
        let images = archive
            .tensors
            .remove("images")
            .ok_or_else(|| Error::Checkpoint { path: archive.path.clone(), reason: "missing images".into() })?;
        Self::new(header.descriptor, images, header.labels, header.ids, header.splits)
    }
}
