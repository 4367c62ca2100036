//! Environmental sound classification pipeline.
//!
//! The crate is organized along the stages of the pipeline:
//!
//! - [`audio`] — WAV ingestion, band-limited resampling, normalization to
//!   mono waveforms at the canonical 44.1 kHz rate.
//! - [`features`] — log-scaled mel spectrograms and the fixed-size
//!   128x128 time-frequency patches the network consumes.
//! - [`augment`] — the five label-preserving audio deformations (time
//!   stretch, two pitch-shift sets, dynamic range compression, background
//!   mixing) plus provenance manifests.
//! - [`nn`] — a minimal dense-tensor network engine: conv/dense layers,
//!   backpropagation, SGD, dropout, L2 and a finite-difference gradient
//!   checker.
//! - [`sbcnn`] — the 5-layer convolutional architecture and patch/clip
//!   level prediction.
//! - [`pipeline`] — dataset indexing, synthetic dataset generation,
//!   augmentation orchestration, the training loop, 10-fold cross
//!   validation and report generation.

pub mod audio;
pub mod augment;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod sbcnn;

#[cfg(feature = "testsupport")]
pub mod testsupport;
