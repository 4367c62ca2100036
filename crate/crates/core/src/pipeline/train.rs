//! The minibatch training loop with per-epoch checkpointing and
//! validation-based model selection.

use std::collections::HashSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::DeformationKind;
use crate::features::{extract_patch, patch_count, MelSpectrogram, N_BANDS, PATCH_FRAMES};
use crate::nn::{train_step, Model, Tensor};
use crate::sbcnn::{predict_clip, standardize_patch};

use super::{DatasetIndex, FeatureStore, PipelineError};

/// Train / validation / test fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_fold: u8,
    pub validation_fold: u8,
    pub train_folds: Vec<u8>,
}

impl SplitPlan {
    pub fn new(test_fold: u8, validation_fold: u8, folds: &[u8]) -> Result<SplitPlan, PipelineError> {
        if test_fold == validation_fold {
            return Err(PipelineError::InvalidArg(
                "test and validation folds must differ".into(),
            ));
        }
        if !folds.contains(&test_fold) || !folds.contains(&validation_fold) {
            return Err(PipelineError::InvalidArg(format!(
                "folds {test_fold}/{validation_fold} not present in {folds:?}"
            )));
        }
        let train_folds: Vec<u8> = folds
            .iter()
            .copied()
            .filter(|&f| f != test_fold && f != validation_fold)
            .collect();
        if train_folds.is_empty() {
            return Err(PipelineError::InvalidArg("no training folds left".into()));
        }
        Ok(SplitPlan {
            test_fold,
            validation_fold,
            train_folds,
        })
    }

    /// Validation fold is the next present fold after the test fold,
    /// cyclically. The fixed rule keeps cross-validation reproducible.
    pub fn cyclic(test_fold: u8, folds: &[u8]) -> Result<SplitPlan, PipelineError> {
        let pos = folds
            .iter()
            .position(|&f| f == test_fold)
            .ok_or_else(|| PipelineError::InvalidArg(format!("fold {test_fold} not present")))?;
        let validation_fold = folds[(pos + 1) % folds.len()];
        SplitPlan::new(test_fold, validation_fold, folds)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    /// Fraction of the total available patch count consumed per epoch.
    pub epoch_fraction: f64,
    pub seed: u64,
    /// Augmentation sets whose variants participate in training;
    /// originals always do.
    pub augmentation_sets: Vec<DeformationKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 0.01,
            epochs: 50,
            epoch_fraction: 1.0 / 8.0,
            seed: 0,
            augmentation_sets: DeformationKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Write a checkpoint after every epoch into this directory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Record the index-entry id of every sampled patch, per epoch.
    pub record_sampling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub patches_consumed: usize,
    pub mean_loss: f64,
    pub validation_correct: usize,
    pub validation_total: usize,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub total_patches: usize,
    pub patch_budget_per_epoch: usize,
    /// 1-based epoch whose checkpoint was selected (earliest on ties).
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub epochs: Vec<EpochLog>,
    /// Per epoch, the index-entry position of every sampled patch, in
    /// draw order. Only present when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled_entries: Option<Vec<Vec<u32>>>,
}

struct TrainEntry<'a> {
    index_pos: usize,
    class: u8,
    spec: &'a MelSpectrogram,
    patches: usize,
}

/// Train a model on the plan's training folds, selecting the epoch with
/// the highest validation clip accuracy (earliest on ties).
///
/// Each epoch streams seeded random minibatches of TF-patches, sampled
/// uniformly over all (clip, start_frame) pairs without repetition
/// within the epoch, until `floor(total_patches * epoch_fraction)`
/// patches are consumed. Augmented variants of clips outside the
/// training folds never participate; this is asserted, not assumed.
pub fn train(
    index: &DatasetIndex,
    plan: &SplitPlan,
    config: &TrainConfig,
    store: &FeatureStore,
    build_model: &dyn Fn(u64) -> Model<f32>,
    options: &TrainOptions,
) -> Result<(Model<f32>, TrainingLog), PipelineError> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(PipelineError::InvalidArg("batch_size and epochs must be >= 1".into()));
    }
    if !(config.epoch_fraction > 0.0 && config.epoch_fraction <= 1.0) {
        return Err(PipelineError::InvalidArg("epoch_fraction must be in (0, 1]".into()));
    }

    let source_map = index.source_map();
    let excluded = [plan.test_fold, plan.validation_fold];

    let mut entries: Vec<TrainEntry> = Vec::new();
    for (pos, entry) in index.entries.iter().enumerate() {
        if !plan.train_folds.contains(&entry.fold) {
            continue;
        }
        match &entry.origin_id {
            None => {}
            Some(origin) => {
                if entry.augment_set.is_none()
                    || !config.augmentation_sets.contains(&entry.augment_set.unwrap())
                {
                    continue;
                }
                // Provenance guard: a variant's source clip must itself
                // live outside the held-out folds.
                let origin_entry = source_map
                    .get(origin.as_str())
                    .map(|&i| &index.entries[i])
                    .ok_or_else(|| PipelineError::Leakage(format!("unknown origin {origin}")))?;
                if excluded.contains(&origin_entry.fold) {
                    return Err(PipelineError::Leakage(format!(
                        "variant {} of held-out clip {origin} reached training",
                        entry.source_id
                    )));
                }
            }
        }
        let spec = store
            .get(&entry.source_id)
            .ok_or_else(|| PipelineError::MissingFeatures(entry.source_id.clone()))?;
        entries.push(TrainEntry {
            index_pos: pos,
            class: entry.class,
            spec,
            patches: patch_count(spec.n_frames()),
        });
    }
    if entries.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }

    let validation: Vec<(&MelSpectrogram, u8)> = index
        .entries
        .iter()
        .filter(|e| e.fold == plan.validation_fold && e.is_original())
        .map(|e| {
            store
                .get(&e.source_id)
                .map(|s| (s, e.class))
                .ok_or_else(|| PipelineError::MissingFeatures(e.source_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    if validation.is_empty() {
        return Err(PipelineError::EmptyValidation(plan.validation_fold));
    }

    // Cumulative patch counts for uniform sampling over all patches.
    let mut cumulative = Vec::with_capacity(entries.len());
    let mut total_patches = 0usize;
    for e in &entries {
        cumulative.push(total_patches);
        total_patches += e.patches;
    }
    let budget = ((total_patches as f64 * config.epoch_fraction).floor() as usize).max(1);

    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut model = build_model(config.seed);
    // Offset keeps the sampling stream distinct from the builder's.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let mut log = TrainingLog {
        total_patches,
        patch_budget_per_epoch: budget,
        best_epoch: 0,
        best_validation_accuracy: -1.0,
        epochs: Vec::with_capacity(config.epochs),
        sampled_entries: options.record_sampling.then(Vec::new),
    };
    let mut best_model = model.clone();

    for epoch in 1..=config.epochs {
        let mut drawn: HashSet<(u32, u32)> = HashSet::with_capacity(budget * 2);
        let mut epoch_samples: Vec<u32> = Vec::new();
        let mut batch: Vec<(usize, usize)> = Vec::with_capacity(config.batch_size);
        let mut consumed = 0usize;
        let mut batches = 0usize;
        let mut loss_acc = 0.0f64;

        while consumed < budget {
            let r = rng.gen_range(0..total_patches as u64) as usize;
            let ti = match cumulative.binary_search(&r) {
                Ok(i) => i,
                Err(i) => i - 1,
            };
            let start = r - cumulative[ti];
            if !drawn.insert((ti as u32, start as u32)) {
                continue;
            }
            consumed += 1;
            batch.push((ti, start));
            if options.record_sampling {
                epoch_samples.push(entries[ti].index_pos as u32);
            }
            if batch.len() == config.batch_size || consumed == budget {
                let loss = run_batch(&mut model, &entries, &batch, config, &mut rng)?;
                loss_acc += loss as f64 * batch.len() as f64;
                batches += 1;
                batch.clear();
            }
        }

        let correct: usize = validation
            .par_iter()
            .map(|(spec, class)| {
                predict_clip(&model, spec)
                    .map(|p| (p.class == *class as usize) as usize)
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .sum();
        let accuracy = correct as f64 / validation.len() as f64;

        if let Some(dir) = &options.checkpoint_dir {
            crate::nn::save_checkpoint(&model, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
        if accuracy > log.best_validation_accuracy {
            log.best_validation_accuracy = accuracy;
            log.best_epoch = epoch;
            best_model = model.clone();
        }

        log.epochs.push(EpochLog {
            epoch,
            batches,
            patches_consumed: consumed,
            mean_loss: loss_acc / consumed as f64,
            validation_correct: correct,
            validation_total: validation.len(),
            validation_accuracy: accuracy,
        });
        if let Some(sampled) = log.sampled_entries.as_mut() {
            sampled.push(epoch_samples);
        }
        log::info!(
            "epoch {epoch}: {batches} batches, loss {:.4}, val {:.3}",
            log.epochs.last().unwrap().mean_loss,
            accuracy
        );
    }

    if let Some(dir) = &options.checkpoint_dir {
        crate::nn::save_checkpoint(&best_model, &dir.join("best.ckpt"))?;
    }
    Ok((best_model, log))
}

fn run_batch(
    model: &mut Model<f32>,
    entries: &[TrainEntry],
    batch: &[(usize, usize)],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f32, PipelineError> {
    let mut data = Vec::with_capacity(batch.len() * PATCH_FRAMES * N_BANDS);
    let mut targets = Vec::with_capacity(batch.len());
    for &(ti, start) in batch {
        let patch = extract_patch(entries[ti].spec, start)?;
        let mut values: Vec<f32> = patch.values.iter().copied().collect();
        standardize_patch(&mut values);
        data.extend_from_slice(&values);
        targets.push(entries[ti].class as usize);
    }
    let tensor = Tensor::new(vec![batch.len(), 1, PATCH_FRAMES, N_BANDS], data)?;
    Ok(train_step(model, &tensor, &targets, config.learning_rate, rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{glorot_conv, glorot_dense, ActivationKind, Layer};
    use crate::pipeline::synth_dataset;

    /// A deliberately tiny architecture for bookkeeping-focused tests.
    pub(crate) fn stub_builder(n_classes: usize) -> impl Fn(u64) -> Model<f32> {
        move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Model::new(vec![
                Layer::Conv(glorot_conv(2, 1, (8, 8), ActivationKind::Relu, Some((16, 16)), 0.0, &mut rng)),
                Layer::Dense(glorot_dense(2 * 7 * 7, n_classes, ActivationKind::Softmax, 0.0, 0.0, &mut rng)),
            ])
            .unwrap()
        }
    }

    fn small_setup(seed: u64) -> (tempfile::TempDir, DatasetIndex) {
        let dir = tempfile::tempdir().unwrap();
        let index = synth_dataset(4, 2, seed, dir.path()).unwrap();
        (dir, index)
    }

    #[test]
    fn budget_is_an_eighth_of_the_patch_total() {
        let (_dir, index) = small_setup(21);
        let store = FeatureStore::build(&index, None).unwrap();
        let plan = SplitPlan::cyclic(1, &index.folds()).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, log) = train(&index, &plan, &config, &store, &stub_builder(2), &TrainOptions::default()).unwrap();
        // 4 clips of 173 frames remain in training folds: 2 per class in
        // folds 3 and 4; each contributes 46 patch starts.
        assert_eq!(log.total_patches, 4 * 46);
        assert_eq!(log.patch_budget_per_epoch, 4 * 46 / 8);
        assert_eq!(log.epochs[0].patches_consumed, log.patch_budget_per_epoch);
    }

    #[test]
    fn same_seed_reproduces_the_log() {
        let (_dir, index) = small_setup(22);
        let store = FeatureStore::build(&index, None).unwrap();
        let plan = SplitPlan::cyclic(2, &index.folds()).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            record_sampling: true,
            ..TrainOptions::default()
        };
        let (m1, l1) = train(&index, &plan, &config, &store, &stub_builder(2), &opts).unwrap();
        let (m2, l2) = train(&index, &plan, &config, &store, &stub_builder(2), &opts).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(
            serde_json::to_string(&l1).unwrap(),
            serde_json::to_string(&l2).unwrap()
        );
    }

    #[test]
    fn cyclic_plan_covers_all_folds() {
        let plan = SplitPlan::cyclic(4, &[1, 2, 3, 4]).unwrap();
        assert_eq!(plan.validation_fold, 1);
        assert_eq!(plan.train_folds, vec![2, 3]);
        let plan = SplitPlan::cyclic(2, &[1, 2, 3, 4]).unwrap();
        assert_eq!(plan.validation_fold, 3);
        assert_eq!(plan.train_folds, vec![1, 4]);
    }

    #[test]
    fn sampled_patches_never_come_from_held_out_folds() {
        let (_dir, index) = small_setup(23);
        let store = FeatureStore::build(&index, None).unwrap();
        let plan = SplitPlan::cyclic(1, &index.folds()).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 7,
            seed: 13,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            record_sampling: true,
            ..TrainOptions::default()
        };
        let (_, log) = train(&index, &plan, &config, &store, &stub_builder(2), &opts).unwrap();
        let source_map = index.source_map();
        for epoch in log.sampled_entries.as_ref().unwrap() {
            assert!(!epoch.is_empty());
            for &pos in epoch {
                let entry = &index.entries[pos as usize];
                let origin = entry
                    .origin_id
                    .as_ref()
                    .map(|o| &index.entries[source_map[o.as_str()]])
                    .unwrap_or(entry);
                assert_ne!(origin.fold, plan.test_fold);
                assert_ne!(origin.fold, plan.validation_fold);
            }
        }
    }

    #[test]
    fn set_filter_excludes_disabled_variants() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let base = synth_dataset(3, 2, 31, src.path()).unwrap();
        let index = crate::pipeline::augment_dataset(
            &base,
            &[DeformationKind::TimeStretch, DeformationKind::Drc],
            &[],
            3,
            dst.path(),
        )
        .unwrap();
        let store = FeatureStore::build(&index, None).unwrap();
        let plan = SplitPlan::cyclic(1, &index.folds()).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed: 2,
            augmentation_sets: vec![DeformationKind::TimeStretch],
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            record_sampling: true,
            ..TrainOptions::default()
        };
        let (_, log) = train(&index, &plan, &config, &store, &stub_builder(2), &opts).unwrap();
        for epoch in log.sampled_entries.as_ref().unwrap() {
            for &pos in epoch {
                let entry = &index.entries[pos as usize];
                assert_ne!(entry.augment_set, Some(DeformationKind::Drc));
            }
        }
        // Time-stretch variants contribute: stretched clips have
        // different frame counts, so the total exceeds originals alone.
        let originals_only: usize = index
            .entries
            .iter()
            .filter(|e| e.is_original() && plan.train_folds.contains(&e.fold))
            .count()
            * 46;
        assert!(log.total_patches > originals_only);
    }

    #[test]
    fn checkpoints_are_written_per_epoch() {
        let (_dir, index) = small_setup(24);
        let store = FeatureStore::build(&index, None).unwrap();
        let plan = SplitPlan::cyclic(3, &index.folds()).unwrap();
        let ckpt = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 12,
            seed: 3,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            checkpoint_dir: Some(ckpt.path().to_path_buf()),
            record_sampling: false,
        };
        let (best, log) = train(&index, &plan, &config, &store, &stub_builder(2), &opts).unwrap();
        assert!(ckpt.path().join("epoch_001.ckpt").exists());
        assert!(ckpt.path().join("epoch_002.ckpt").exists());
        let loaded = crate::nn::load_checkpoint(&ckpt.path().join("best.ckpt")).unwrap();
        assert_eq!(loaded, best);
        assert!(log.best_epoch >= 1 && log.best_epoch <= 2);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (_dir, index) = small_setup(25);
        let store = FeatureStore::build(&index, None).unwrap();
        // Plan that drains training folds: only folds 1 and 2 exist in a
        // 2-clip-per-class dataset... use explicit folds to force it.
        let plan = SplitPlan {
            test_fold: 1,
            validation_fold: 2,
            train_folds: vec![9],
        };
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = train(&index, &plan, &config, &store, &stub_builder(2), &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, PipelineError::EmptyTrainingSet));
    }
}
