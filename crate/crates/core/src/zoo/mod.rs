//! Classifiers under explanation, datasets, and the metric encoders.

mod classifier;
mod dataset;
mod encoder;
mod ingest;
pub mod synthetic;

pub use classifier::{
    accuracy, argmax, predict_labels, predict_probs, probs_rows, train_classifier, Classifier, ClassifierArch,
    ClassifierHeader, ClassifierTrainConfig, PatchClassifier,
};
pub use dataset::{Dataset, DatasetDescriptor, Provenance};
pub use encoder::{
    train_contrastive_encoder, ContrastiveEncoder, EncoderArch, EncoderAsset, EncoderHeader, EncoderTrainConfig,
    FeatureEncoder, IdentityEncoder, LayeredEncoder, PerceptualDistance,
};
pub use ingest::{ingest_dataset, IngestConfig, IngestIssue, IngestReport};

pub(crate) use classifier::cross_entropy_rows;
