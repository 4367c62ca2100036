//! Offline dataset augmentation: apply the enabled deformation sets to
//! every original clip, write the deformed audio and manifests, and
//! produce the combined index.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::audio::{load_wav, resample, write_wav, AudioClip, CANONICAL_RATE};
use crate::augment::{apply, paper_specs, AugmentationManifest, DeformationKind};

use super::index::{load_index, write_metadata};
use super::{DatasetIndex, IndexEntry, PipelineError};

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for part in parts {
        for &b in *part {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

/// Apply each enabled augmentation set (4 variants per set) to every
/// original clip of the index. Originals are copied into `out_dir` so
/// the result is a self-contained dataset; variants inherit fold and
/// label from their source. Writes `metadata.csv` and
/// `manifests.jsonl`; background mixing requires at least one scene.
pub fn augment_dataset(
    index: &DatasetIndex,
    sets: &[DeformationKind],
    backgrounds: &[AudioClip],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetIndex, PipelineError> {
    if sets.is_empty() {
        return Err(PipelineError::InvalidArg("no augmentation sets selected".into()));
    }
    if sets.contains(&DeformationKind::BackgroundNoise) && backgrounds.is_empty() {
        return Err(PipelineError::InvalidArg(
            "background mixing needs at least one background clip".into(),
        ));
    }

    let audio_root = out_dir.join("audio");
    let scene_ids: Vec<String> = backgrounds.iter().map(|b| b.source_id.clone()).collect();
    let originals: Vec<&IndexEntry> = index.originals().collect();

    let per_entry: Vec<(Vec<IndexEntry>, Vec<AugmentationManifest>)> = originals
        .par_iter()
        .map(|entry| -> Result<_, PipelineError> {
            let fold_dir = audio_root.join(format!("fold{}", entry.fold));
            std::fs::create_dir_all(&fold_dir)?;

            // Copy the original into the output tree, byte-preserving.
            let dst = fold_dir.join(&entry.file_name);
            if dst != entry.path {
                std::fs::copy(&entry.path, &dst)?;
            }
            let mut rows = vec![IndexEntry {
                path: dst,
                ..(*entry).clone()
            }];

            let clip = load_wav(&entry.path)?;
            let clip = resample(&clip, CANONICAL_RATE)?;
            let clip = AudioClip {
                source_id: entry.source_id.clone(),
                class_label: Some(entry.class),
                ..clip
            };

            let mut manifests = Vec::new();
            for &kind in sets {
                let base_seed = fnv1a64(&[
                    &seed.to_le_bytes(),
                    entry.source_id.as_bytes(),
                    kind.tag().as_bytes(),
                ]);
                for spec in paper_specs(kind, &scene_ids, base_seed) {
                    let (deformed, manifest) = apply(&clip, &spec, backgrounds)?;
                    let file_name = format!("{}.wav", manifest.output_id);
                    let path = fold_dir.join(&file_name);
                    write_wav(&deformed, &path)?;
                    rows.push(IndexEntry {
                        path,
                        file_name,
                        source_id: manifest.output_id.clone(),
                        class: entry.class,
                        fold: entry.fold,
                        origin_id: Some(entry.source_id.clone()),
                        augment_set: Some(kind),
                    });
                    manifests.push(manifest);
                }
            }
            Ok((rows, manifests))
        })
        .collect::<Result<_, _>>()?;

    let mut entries = Vec::new();
    let mut manifest_file = std::fs::File::create(out_dir.join("manifests.jsonl"))?;
    for (rows, manifests) in per_entry {
        entries.extend(rows);
        for m in manifests {
            let line = serde_json::to_string(&m).expect("manifest serializes");
            writeln!(manifest_file, "{line}")?;
        }
    }

    let metadata = out_dir.join("metadata.csv");
    write_metadata(&entries, &metadata)?;
    load_index(&metadata, &audio_root)
}
