//! Models and datasets the service can run against.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use ace_core::checkpoint::{self, AssetKind};
use ace_core::diffusion::EpsDenoiser;
use ace_core::image::Geometry;
use ace_core::zoo::{
    ingest_dataset, synthetic, Classifier, ContrastiveEncoder, Dataset, DatasetDescriptor, FeatureEncoder, IngestConfig, LayeredEncoder,
    PatchClassifier,
};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::records::now;
use crate::store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Denoiser,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub kind: ModelKind,
    pub geometry: Geometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_accuracy: Option<f64>,
    /// Length of the diffusion chain and the last timestep it was trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_timestep: Option<usize>,
    pub registered_at: String,
}

#[derive(Clone)]
pub enum Model {
    Classifier(Arc<PatchClassifier>),
    Denoiser(Arc<EpsDenoiser>),
    Encoder(Arc<ContrastiveEncoder>),
}

impl Model {
    fn load(path: &Path) -> ace_core::Result<Self> {
        let archive = checkpoint::load(path)?;
        Ok(match archive.kind {
            AssetKind::Classifier => Model::Classifier(Arc::new(PatchClassifier::load(path)?)),
            AssetKind::Denoiser => Model::Denoiser(Arc::new(EpsDenoiser::load(path)?)),
            AssetKind::Encoder => Model::Encoder(Arc::new(ContrastiveEncoder::load(path)?)),
            AssetKind::Dataset => {
                return Err(ace_core::Error::Validation(format!("{} is a dataset, not a model", path.display())))
            }
        })
    }

    fn info(&self, id: &str) -> ModelInfo {
        let base = |kind, geometry| ModelInfo {
            id: id.to_string(),
            kind,
            geometry,
            label_names: None,
            held_out_accuracy: None,
            num_steps: None,
            max_timestep: None,
            registered_at: now(),
        };
        match self {
            Model::Classifier(c) => ModelInfo {
                label_names: Some(c.label_names()),
                held_out_accuracy: c.held_out_accuracy(),
                ..base(ModelKind::Classifier, c.geometry())
            },
            Model::Denoiser(d) => ModelInfo {
                num_steps: Some(d.schedule().num_steps()),
                max_timestep: Some(d.max_timestep()),
                ..base(ModelKind::Denoiser, ace_core::diffusion::Denoiser::geometry(d.as_ref()))
            },
            Model::Encoder(e) => ModelInfo { ..base(ModelKind::Encoder, e.header().geometry) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: String,
    #[serde(flatten)]
    pub descriptor: DatasetDescriptor,
}

/// One instance of a dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub index: usize,
    pub id: String,
    pub label: usize,
    pub label_name: String,
}

pub struct Registry {
    models_dir: PathBuf,
    models: RwLock<BTreeMap<String, (ModelInfo, Model)>>,
    datasets: RwLock<BTreeMap<String, Arc<Dataset>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

impl Registry {
    /// Loads registered models from `root/models` and datasets from
    /// `root/datasets`: saved `*.dataset` archives, and sub-directories of
    /// PNG files with a `labels.csv` manifest. The builtin synthetic
    /// benchmark is always present as `synthetic`.
    pub fn open(root: &Path, builtin: &synthetic::SyntheticConfig, strict_ingest: bool) -> std::io::Result<Self> {
        let models_dir = root.join("models");
        let datasets_dir = root.join("datasets");
        std::fs::create_dir_all(&models_dir)?;
        std::fs::create_dir_all(&datasets_dir)?;
        let mut models = BTreeMap::new();
        for entry in sorted_entries(&models_dir)? {
            if entry.extension().is_some_and(|e| e == "json") {
                let info: ModelInfo = match std::fs::read_to_string(&entry).map(|t| serde_json::from_str(&t)) {
                    Ok(Ok(i)) => i,
                    _ => {
                        tracing::warn!(path = %entry.display(), "unreadable model entry");
                        continue;
                    }
                };
                match Model::load(&models_dir.join(format!("{}.ckpt", info.id))) {
                    Ok(model) => {
                        models.insert(info.id.clone(), (info, model));
                    }
                    Err(e) => tracing::warn!(id = info.id, error = %e, "model checkpoint failed to load"),
                }
            }
        }
        let mut datasets = BTreeMap::new();
        match synthetic::generate(builtin) {
            Ok(d) => {
                datasets.insert("synthetic".to_string(), Arc::new(d));
            }
            Err(e) => tracing::error!(error = %e, "builtin benchmark unavailable"),
        }
        for entry in sorted_entries(&datasets_dir)? {
            let Some(stem) = entry.file_stem().map(|s| s.to_string_lossy().into_owned()) else { continue };
            let loaded = if entry.is_dir() {
                let cfg = IngestConfig { name: Some(stem.clone()), strict: strict_ingest, ..Default::default() };
                ingest_dataset(&entry, &cfg).map(|(d, report)| {
                    if !report.issues.is_empty() {
                        tracing::warn!(dataset = stem, issues = %report.summary(), "ingested with issues");
                    }
                    d
                })
            } else if entry.extension().is_some_and(|e| e == "dataset") {
                Dataset::load(&entry)
            } else {
                continue;
            };
            match loaded {
                Ok(d) => {
                    datasets.insert(stem, Arc::new(d));
                }
                Err(e) => tracing::error!(path = %entry.display(), error = %e, "dataset not registered"),
            }
        }
        Ok(Self { models_dir, models: RwLock::new(models), datasets: RwLock::new(datasets) })
    }

    /// Copies a checkpoint into the registry after checking that it loads.
    pub fn register_model(&self, source: &Path, id: Option<&str>, expected: Option<ModelKind>) -> ApiResult<ModelInfo> {
        let model = Model::load(source)?;
        let id = match id {
            Some(id) => id.to_string(),
            None => source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        if !valid_id(&id) {
            return Err(ApiError::invalid(format!("`{id}` is not a valid model id")));
        }
        let info = model.info(&id);
        if let Some(kind) = expected.filter(|k| *k != info.kind) {
            return Err(ApiError::invalid(format!("checkpoint holds a {:?} model, not a {kind:?}", info.kind)));
        }
        let mut models = self.models.write().expect("registry lock");
        if models.contains_key(&id) {
            return Err(ApiError::new(axum::http::StatusCode::CONFLICT, "conflict", format!("model `{id}` already registered")));
        }
        let target = self.models_dir.join(format!("{id}.ckpt"));
        let tmp = target.with_extension("ckpt.tmp");
        std::fs::copy(source, &tmp)?;
        std::fs::rename(&tmp, &target)?;
        write_atomic(&self.models_dir.join(format!("{id}.json")), &serde_json::to_vec_pretty(&info).map_err(ace_core::Error::from)?)?;
        models.insert(id, (info.clone(), model));
        Ok(info)
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.models.read().expect("registry lock").values().map(|(i, _)| i.clone()).collect()
    }

    fn model(&self, id: &str) -> ApiResult<Model> {
        self.models
            .read()
            .expect("registry lock")
            .get(id)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| ApiError::not_found(format!("model `{id}`")))
    }

    pub fn classifier(&self, id: &str) -> ApiResult<Arc<PatchClassifier>> {
        match self.model(id)? {
            Model::Classifier(c) => Ok(c),
            _ => Err(ApiError::invalid(format!("model `{id}` is not a classifier"))),
        }
    }

    pub fn denoiser(&self, id: &str) -> ApiResult<Arc<EpsDenoiser>> {
        match self.model(id)? {
            Model::Denoiser(d) => Ok(d),
            _ => Err(ApiError::invalid(format!("model `{id}` is not a denoiser"))),
        }
    }

    /// A model usable as a feature encoder: a classifier's penultimate
    /// features or a self-supervised encoder.
    pub fn encoder(&self, id: &str) -> ApiResult<Arc<dyn FeatureEncoder>> {
        match self.model(id)? {
            Model::Classifier(c) => Ok(c),
            Model::Encoder(e) => Ok(e),
            Model::Denoiser(_) => Err(ApiError::invalid(format!("model `{id}` cannot encode features"))),
        }
    }

    /// A model exposing intermediate activations for perceptual distances.
    pub fn layered(&self, id: &str) -> ApiResult<Arc<dyn LayeredEncoder>> {
        match self.model(id)? {
            Model::Classifier(c) => Ok(c),
            Model::Encoder(e) => Ok(e),
            Model::Denoiser(_) => Err(ApiError::invalid(format!("model `{id}` cannot encode features"))),
        }
    }

    /// The first registered self-supervised encoder, if any.
    pub fn default_self_supervised(&self) -> Option<String> {
        self.models.read().expect("registry lock").values().find(|(i, _)| i.kind == ModelKind::Encoder).map(|(i, _)| i.id.clone())
    }

    pub fn datasets(&self) -> Vec<DatasetInfo> {
        self.datasets
            .read()
            .expect("registry lock")
            .iter()
            .map(|(id, d)| DatasetInfo { id: id.clone(), descriptor: d.descriptor.clone() })
            .collect()
    }

    pub fn dataset(&self, id: &str) -> ApiResult<Arc<Dataset>> {
        self.datasets.read().expect("registry lock").get(id).cloned().ok_or_else(|| ApiError::not_found(format!("dataset `{id}`")))
    }

    pub fn instances(&self, id: &str, split: &str) -> ApiResult<Vec<InstanceInfo>> {
        let d = self.dataset(id)?;
        let idx = d.split_indices(split)?;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(index, &i)| InstanceInfo {
                index,
                id: d.ids[i].clone(),
                label: d.labels[i],
                label_name: d.descriptor.class_names[d.labels[i]].clone(),
            })
            .collect())
    }
}

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    v.sort();
    Ok(v)
}
