//! Clip-level evaluation, cross validation and report generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::MelSpectrogram;
use crate::nn::Model;
use crate::sbcnn::ClipPrediction;

use super::train::{train, SplitPlan, TrainConfig, TrainOptions, TrainingLog};
use super::{DatasetIndex, FeatureStore, PipelineError};

/// Anything that can produce a clip-level prediction from a
/// spectrogram. Implemented by the trained model; test suites inject
/// stubs to exercise the bookkeeping in isolation.
pub trait ClipClassifier: Sync {
    fn classify(&self, spec: &MelSpectrogram) -> Result<ClipPrediction, PipelineError>;
}

impl ClipClassifier for Model<f32> {
    fn classify(&self, spec: &MelSpectrogram) -> Result<ClipPrediction, PipelineError> {
        Ok(crate::sbcnn::predict_clip(self, spec)?)
    }
}

/// Accuracy and confusion counts for one test fold. Confusion rows are
/// the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEvaluation {
    pub fold: u8,
    pub n_clips: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

/// Evaluate a classifier on the original clips of one fold.
pub fn evaluate<C: ClipClassifier>(
    classifier: &C,
    index: &DatasetIndex,
    test_fold: u8,
    store: &FeatureStore,
) -> Result<FoldEvaluation, PipelineError> {
    let clips: Vec<(&str, u8)> = index
        .entries
        .iter()
        .filter(|e| e.fold == test_fold && e.is_original())
        .map(|e| (e.source_id.as_str(), e.class))
        .collect();
    if clips.is_empty() {
        return Err(PipelineError::EmptyFold(test_fold));
    }

    let n = index.n_classes();
    let outcomes: Vec<(u8, usize)> = clips
        .par_iter()
        .map(|(id, class)| -> Result<_, PipelineError> {
            let spec = store
                .get(id)
                .ok_or_else(|| PipelineError::MissingFeatures(id.to_string()))?;
            let prediction = classifier.classify(spec)?;
            Ok((*class, prediction.class))
        })
        .collect::<Result<_, _>>()?;

    let mut confusion = vec![vec![0u64; n]; n];
    let mut correct = 0usize;
    for (true_class, predicted) in &outcomes {
        confusion[*true_class as usize][(*predicted).min(n - 1)] += 1;
        if *predicted == *true_class as usize {
            correct += 1;
        }
    }
    Ok(FoldEvaluation {
        fold: test_fold,
        n_clips: clips.len(),
        correct,
        accuracy: correct as f64 / clips.len() as f64,
        confusion,
    })
}

/// Five-number summary plus Tukey whiskers over fold accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPlotStats {
    pub minimum: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub maximum: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn boxplot(values: &[f64]) -> BoxPlotStats {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let fence_low = q1 - 1.5 * iqr;
    let fence_high = q3 + 1.5 * iqr;
    let whisker_low = sorted
        .iter()
        .copied()
        .find(|&v| v >= fence_low)
        .unwrap_or(sorted[0]);
    let whisker_high = sorted
        .iter()
        .rev()
        .copied()
        .find(|&v| v <= fence_high)
        .unwrap_or(sorted[sorted.len() - 1]);
    BoxPlotStats {
        minimum: sorted[0],
        q1,
        median,
        q3,
        maximum: sorted[sorted.len() - 1],
        whisker_low,
        whisker_high,
        outliers: sorted
            .iter()
            .copied()
            .filter(|&v| v < fence_low || v > fence_high)
            .collect(),
    }
}

/// Aggregated cross-validation results: per-fold accuracies, pooled
/// confusion, per-class accuracy and box-plot statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub per_fold: Vec<FoldEvaluation>,
    pub mean_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Pooled over folds; rows true class, columns predicted.
    pub confusion: Vec<Vec<u64>>,
    pub boxplot: BoxPlotStats,
}

/// Build a report from per-fold evaluations.
pub fn report_from_folds(class_names: Vec<String>, per_fold: Vec<FoldEvaluation>) -> EvaluationReport {
    let n = class_names.len();
    let mut confusion = vec![vec![0u64; n]; n];
    for fold in &per_fold {
        for (r, row) in fold.confusion.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                confusion[r][c] += v;
            }
        }
    }
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                confusion[r][r] as f64 / total as f64
            }
        })
        .collect();
    let accuracies: Vec<f64> = per_fold.iter().map(|f| f.accuracy).collect();
    EvaluationReport {
        class_names,
        mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        per_class_accuracy,
        confusion,
        boxplot: boxplot(&accuracies),
        per_fold,
    }
}

impl EvaluationReport {
    /// Pooled accuracy: total correct over total clips.
    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        let total: u64 = self.confusion.iter().flatten().sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Full k-fold cross validation: for every fold present, train on the
/// rest (validation fold chosen cyclically) and evaluate on it.
/// Checkpoints, when requested, land in per-fold subdirectories.
pub fn cross_validate(
    index: &DatasetIndex,
    config: &TrainConfig,
    store: &FeatureStore,
    build_model: &dyn Fn(u64) -> Model<f32>,
    options: &TrainOptions,
) -> Result<(EvaluationReport, Vec<TrainingLog>), PipelineError> {
    let folds = index.folds();
    if folds.len() < 3 {
        return Err(PipelineError::InvalidArg(format!(
            "cross validation needs at least 3 folds, found {folds:?}"
        )));
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut logs = Vec::with_capacity(folds.len());
    for &fold in &folds {
        let plan = SplitPlan::cyclic(fold, &folds)?;
        let fold_options = TrainOptions {
            checkpoint_dir: options
                .checkpoint_dir
                .as_ref()
                .map(|d| d.join(format!("fold{fold}"))),
            record_sampling: options.record_sampling,
        };
        let (model, log) = train(index, &plan, config, store, build_model, &fold_options)?;
        per_fold.push(evaluate(&model, index, fold, store)?);
        logs.push(log);
    }
    Ok((report_from_folds(index.class_names.clone(), per_fold), logs))
}

/// Per-class accuracy deltas of augmented runs against a baseline, one
/// column per augmentation set plus a combined all-classes row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub class_names: Vec<String>,
    /// Column labels (augmentation set names).
    pub sets: Vec<String>,
    /// (n_classes x n_sets): augmented minus baseline per-class accuracy.
    pub per_class_delta: Vec<Vec<f64>>,
    /// Overall (pooled) accuracy delta per set; the "all classes" row.
    pub combined_delta: Vec<f64>,
}

pub fn augmentation_delta_report(
    baseline: &EvaluationReport,
    augmented: &[(String, EvaluationReport)],
) -> Result<DeltaReport, PipelineError> {
    let n = baseline.class_names.len();
    for (_, report) in augmented {
        if report.class_names.len() != n {
            return Err(PipelineError::ClassMismatch);
        }
    }
    let sets: Vec<String> = augmented.iter().map(|(name, _)| name.clone()).collect();
    let per_class_delta: Vec<Vec<f64>> = (0..n)
        .map(|class| {
            augmented
                .iter()
                .map(|(_, r)| r.per_class_accuracy[class] - baseline.per_class_accuracy[class])
                .collect()
        })
        .collect();
    let combined_delta: Vec<f64> = augmented
        .iter()
        .map(|(_, r)| r.overall_accuracy() - baseline.overall_accuracy())
        .collect();
    Ok(DeltaReport {
        class_names: baseline.class_names.clone(),
        sets,
        per_class_delta,
        combined_delta,
    })
}

/// Confusion difference `a - b` (e.g. augmented minus baseline). When
/// both runs tested the same clips, every row sums to zero.
pub fn confusion_delta(
    a: &EvaluationReport,
    b: &EvaluationReport,
) -> Result<Vec<Vec<i64>>, PipelineError> {
    if a.confusion.len() != b.confusion.len() {
        return Err(PipelineError::ClassMismatch);
    }
    Ok(a.confusion
        .iter()
        .zip(&b.confusion)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(&x, &y)| x as i64 - y as i64)
                .collect()
        })
        .collect())
}

/// Test stub: predicts a fixed class for every clip.
#[cfg(test)]
pub(crate) struct ConstantClassifier {
    pub class: usize,
    pub n_classes: usize,
}

#[cfg(test)]
impl ClipClassifier for ConstantClassifier {
    fn classify(&self, _spec: &MelSpectrogram) -> Result<ClipPrediction, PipelineError> {
        let mut p = vec![0.0; self.n_classes];
        p[self.class] = 1.0;
        Ok(ClipPrediction {
            class: self.class,
            mean_activation: p,
        })
    }
}

/// Test stub: recovers the label stored on the spectrogram, optionally
/// lying about every clip of one class.
#[cfg(test)]
pub(crate) struct OracleClassifier {
    pub n_classes: usize,
    pub confuse: Option<(u8, usize)>,
}

#[cfg(test)]
impl ClipClassifier for OracleClassifier {
    fn classify(&self, spec: &MelSpectrogram) -> Result<ClipPrediction, PipelineError> {
        let truth = spec.class_label.unwrap_or(0);
        let class = match self.confuse {
            Some((victim, target)) if victim == truth => target,
            _ => truth as usize,
        };
        let mut p = vec![0.0; self.n_classes];
        p[class] = 1.0;
        Ok(ClipPrediction {
            class,
            mean_activation: p,
        })
    }
}
