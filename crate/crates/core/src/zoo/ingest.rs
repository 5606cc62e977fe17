//! Builds a [`Dataset`] from a directory of PNG files and a CSV manifest of
//! `filename,label` rows.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Geometry};
use crate::zoo::dataset::{Dataset, DatasetDescriptor, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub name: Option<String>,
    /// Manifest path; defaults to `labels.csv` inside the directory.
    pub manifest: Option<PathBuf>,
    /// Expected geometry; when absent the first readable image decides.
    pub geometry: Option<Geometry>,
    pub test_fraction: f64,
    pub seed: u64,
    /// Fail on any problem instead of skipping the offending files.
    pub strict: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { name: None, manifest: None, geometry: None, test_fraction: 0.1, seed: 0, strict: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IngestIssue {
    Unreadable { file: String, reason: String },
    MissingLabel { file: String },
    MissingFile { file: String },
    GeometryMismatch { file: String, found: String, expected: String },
    BadManifestRow { line: usize, reason: String },
}

impl std::fmt::Display for IngestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IngestIssue::Unreadable { file, reason } => write!(f, "{file}: unreadable ({reason})"),
            IngestIssue::MissingLabel { file } => write!(f, "{file}: no label in manifest"),
            IngestIssue::MissingFile { file } => write!(f, "{file}: listed in manifest but not present"),
            IngestIssue::GeometryMismatch { file, found, expected } => {
                write!(f, "{file}: geometry {found}, expected {expected}")
            }
            IngestIssue::BadManifestRow { line, reason } => write!(f, "manifest line {line}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub issues: Vec<IngestIssue>,
}

impl IngestReport {
    pub fn summary(&self) -> String {
        let items: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
        format!("{} accepted, {} rejected: {}", self.accepted, self.issues.len(), items.join("; "))
    }
}

fn read_manifest(path: &Path, issues: &mut Vec<IngestIssue>) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::NotFound(format!("manifest {}", path.display()))
            }
            _ => Error::validation(format!("manifest {}: {e}", path.display())),
        })?;
    let mut labels = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                issues.push(IngestIssue::BadManifestRow { line, reason: e.to_string() });
                continue;
            }
        };
        if row.len() != 2 {
            issues.push(IngestIssue::BadManifestRow { line, reason: format!("expected 2 fields, got {}", row.len()) });
            continue;
        }
        if line == 1 && &row[0] == "filename" && &row[1] == "label" {
            continue;
        }
        if row[1].is_empty() {
            issues.push(IngestIssue::MissingLabel { file: row[0].to_string() });
            continue;
        }
        labels.insert(row[0].to_string(), row[1].to_string());
    }
    Ok(labels)
}

/// Reads and validates a labelled image directory.
///
/// In strict mode any issue aborts with an error listing every problem; in
/// lenient mode offending files are dropped and reported.
pub fn ingest_dataset(dir: impl AsRef<Path>, config: &IngestConfig) -> Result<(Dataset, IngestReport)> {
    let dir = dir.as_ref();
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::config(format!("test_fraction {} outside [0, 1)", config.test_fraction)));
    }
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("dataset directory {}", dir.display())));
    }
    let manifest = config.manifest.clone().unwrap_or_else(|| dir.join("labels.csv"));
    let mut issues = Vec::new();
    let labels = read_manifest(&manifest, &mut issues)?;

    let mut files = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.insert(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    for file in labels.keys().filter(|f| !files.contains(*f)) {
        issues.push(IngestIssue::MissingFile { file: file.clone() });
    }

    let mut geometry = config.geometry;
    let mut images = Vec::new();
    let mut kept = Vec::new();
    for file in &files {
        let Some(label) = labels.get(file) else {
            issues.push(IngestIssue::MissingLabel { file: file.clone() });
            continue;
        };
        let bytes = std::fs::read(dir.join(file))?;
        let decoded = match ::image::load_from_memory(&bytes) {
            Ok(img) => img,
            Err(e) => {
                issues.push(IngestIssue::Unreadable { file: file.clone(), reason: e.to_string() });
                continue;
            }
        };
        let channels = if decoded.color().has_color() { 3 } else { 1 };
        let found = Geometry::new(channels, decoded.height() as usize, decoded.width() as usize);
        let expected = *geometry.get_or_insert(found);
        if found.height != expected.height || found.width != expected.width || (found.channels == 3 && expected.channels == 1) {
            issues.push(IngestIssue::GeometryMismatch { file: file.clone(), found: found.to_string(), expected: expected.to_string() });
            continue;
        }
        let tensor = image::decode_png(&bytes, expected.channels)?;
        images.push(tensor);
        kept.push((file.clone(), label.clone()));
    }

    let report = IngestReport { accepted: kept.len(), issues };
    if config.strict && !report.issues.is_empty() {
        return Err(Error::validation(format!("ingestion of {} failed: {}", dir.display(), report.summary())));
    }
    for issue in &report.issues {
        tracing::warn!(%issue, "skipping during ingestion");
    }
    let geometry = geometry.filter(|_| !kept.is_empty()).ok_or_else(|| {
        Error::validation(format!("no usable images in {}", dir.display()))
    })?;

    let class_names: Vec<String> = kept.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let label_idx: Vec<usize> = kept
        .iter()
        .map(|(_, l)| class_names.iter().position(|c| c == l).expect("label collected above"))
        .collect();
    let n = kept.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_test = (n as f64 * config.test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    let splits = [("train".to_string(), train), ("test".to_string(), test)].into();

    let name = config
        .name
        .clone()
        .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()));
    let descriptor = DatasetDescriptor {
        name,
        geometry,
        class_names,
        split_sizes: BTreeMap::new(),
        provenance: Provenance::IngestedDirectory { path: dir.to_path_buf() },
    };
    let images = Tensor::stack(&images, 0)?;
    let ids = kept.into_iter().map(|(f, _)| f).collect();
    let dataset = Dataset::new(descriptor, images, label_idx, ids, splits)?;
    Ok((dataset, report))
}
