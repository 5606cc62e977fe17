//! Single-file checkpoint archive.
//!
//! An archive is a safetensors file whose string metadata carries a format
//! tag, the asset kind, and a JSON header describing the asset (architecture,
//! geometry, schedule, labels). Tensors hold weights and any array-valued
//! parameters such as the beta schedule.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Weights;

pub const FORMAT_TAG: &str = "ace-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssetKind {
    Denoiser,
    Classifier,
    Encoder,
    Dataset,
}

impl AssetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::Denoiser => "denoiser",
            AssetKind::Classifier => "classifier",
            AssetKind::Encoder => "encoder",
            AssetKind::Dataset => "dataset",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "denoiser" => AssetKind::Denoiser,
            "classifier" => AssetKind::Classifier,
            "encoder" => AssetKind::Encoder,
            "dataset" => AssetKind::Dataset,
            _ => return None,
        })
    }
}

#[derive(Debug)]
pub struct Archive {
    pub path: PathBuf,
    pub kind: AssetKind,
    pub header: serde_json::Value,
    pub tensors: Weights,
}

impl Archive {
    pub fn header_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.clone()).map_err(|e| self.corrupt(format!("bad header: {e}")))
    }

    pub fn expect_kind(&self, kind: AssetKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(self.corrupt(format!("holds a {}, expected a {}", self.kind.as_str(), kind.as_str())))
        }
    }

    fn corrupt(&self, reason: String) -> Error {
        Error::Checkpoint { path: self.path.clone(), reason }
    }
}

/// Writes an archive atomically (temporary file, then rename).
pub fn save(path: impl AsRef<Path>, kind: AssetKind, header: &impl Serialize, tensors: &Weights) -> Result<()> {
    let path = path.as_ref();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("kind".to_string(), kind.as_str().to_string());
    meta.insert("header".to_string(), serde_json::to_string(header)?);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(format!("checkpoint {}", path.display())));
    }
    let bytes = std::fs::read(path)?;
    let corrupt = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let meta = metadata.metadata().clone().unwrap_or_default();
    match meta.get("format") {
        Some(tag) if tag == FORMAT_TAG => {}
        Some(tag) => return Err(corrupt(format!("unsupported format tag `{tag}`"))),
        None => return Err(corrupt("missing format tag".into())),
    }
    let kind = meta
        .get("kind")
        .and_then(|k| AssetKind::parse(k))
        .ok_or_else(|| corrupt("missing or unknown asset kind".into()))?;
    let header = serde_json::from_str(meta.get("header").map(String::as_str).unwrap_or("null"))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(Archive { path: path.to_path_buf(), kind, header, tensors })
}
