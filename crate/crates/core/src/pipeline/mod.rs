//! Dataset management, training and evaluation.
//!
//! The dataset layout mirrors the usual urban-sound corpus structure:
//! a metadata CSV (`slice_file_name, fold, classID, class`, plus
//! `origin`/`augment_set` columns for augmented variants) next to an
//! `audio/fold{N}/` tree. Training streams seeded random minibatches of
//! TF-patches, checkpoints per epoch and selects the epoch with the best
//! validation clip accuracy; evaluation is clip-level with per-fold
//! confusion matrices and box-plot statistics over the fold accuracies.

mod augment_run;
mod evaluate;
mod features_store;
mod index;
mod train;

pub use augment_run::augment_dataset;
pub use evaluate::{
    augmentation_delta_report, confusion_delta, cross_validate, evaluate, report_from_folds,
    BoxPlotStats, ClipClassifier, DeltaReport, EvaluationReport, FoldEvaluation,
};
pub use features_store::FeatureStore;
pub use index::{load_index, synth_dataset, DatasetIndex, IndexEntry, URBAN_CLASS_NAMES};
pub use train::{
    train, EpochLog, SplitPlan, TrainConfig, TrainOptions, TrainingLog,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("metadata line {line}: {detail}")]
    Metadata { line: u64, detail: String },
    #[error("metadata file has no entries")]
    EmptyMetadata,
    #[error("{0} audio files are missing, first: {1:?}")]
    MissingFiles(usize, PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no features available for {0:?}")]
    MissingFeatures(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation fold {0} has no original clips")]
    EmptyValidation(u8),
    #[error("test fold {0} has no original clips")]
    EmptyFold(u8),
    #[error("provenance violation: {0}")]
    Leakage(String),
    #[error("reports disagree on the class set")]
    ClassMismatch,
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Sbcnn(#[from] crate::sbcnn::SbcnnError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
