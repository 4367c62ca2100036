//! Dataset index: metadata ingestion and synthetic dataset generation.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip, CANONICAL_RATE};
use crate::augment::DeformationKind;

use super::PipelineError;

/// The ten class labels, in canonical order. Synthetic datasets reuse
/// the first `n_classes` names so their metadata parses identically.
pub const URBAN_CLASS_NAMES: [&str; 10] = [
    "air conditioner",
    "car horn",
    "children playing",
    "dog bark",
    "drilling",
    "engine idling",
    "gun shot",
    "jackhammer",
    "siren",
    "street music",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: PathBuf,
    /// File name within its fold directory.
    pub file_name: String,
    /// Unique identifier (file stem).
    pub source_id: String,
    pub class: u8,
    pub fold: u8,
    /// For augmented variants, the source clip's id.
    pub origin_id: Option<String>,
    /// For augmented variants, which augmentation set produced them.
    pub augment_set: Option<DeformationKind>,
}

impl IndexEntry {
    pub fn is_original(&self) -> bool {
        self.origin_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    /// Canonical names of the classes present (length = max class + 1).
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Distinct folds, ascending.
    pub fn folds(&self) -> Vec<u8> {
        let set: HashSet<u8> = self.entries.iter().map(|e| e.fold).collect();
        let mut folds: Vec<u8> = set.into_iter().collect();
        folds.sort_unstable();
        folds
    }

    pub fn originals(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(|e| e.is_original())
    }

    /// source_id -> entry position.
    pub fn source_map(&self) -> HashMap<&str, usize> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.source_id.as_str(), i))
            .collect()
    }
}

/// Read and validate a metadata CSV against its audio root. Rows need
/// the columns `slice_file_name, fold, classID, class`; `origin` and
/// `augment_set` are honored when present. Paths resolve as
/// `audio_root/fold{fold}/{slice_file_name}`.
pub fn load_index(metadata_path: &Path, audio_root: &Path) -> Result<DatasetIndex, PipelineError> {
    let mut reader = csv::Reader::from_path(metadata_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| PipelineError::Metadata {
            line: 1,
            detail: format!("missing column {name:?}"),
        })
    };
    let c_file = required("slice_file_name")?;
    let c_fold = required("fold")?;
    let c_class_id = required("classID")?;
    let c_class = required("class")?;
    let c_origin = col("origin");
    let c_set = col("augment_set");

    let mut entries = Vec::new();
    let mut seen_paths = HashSet::new();
    let mut seen_ids = HashSet::new();
    let mut missing = Vec::new();
    let mut max_class = 0u8;

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let bad = |detail: String| PipelineError::Metadata { line, detail };

        let file_name = field(c_file);
        if file_name.is_empty() {
            return Err(bad("empty slice_file_name".into()));
        }
        let fold: u8 = field(c_fold)
            .parse()
            .map_err(|_| bad(format!("bad fold {:?}", field(c_fold))))?;
        if !(1..=10).contains(&fold) {
            return Err(bad(format!("fold {fold} outside 1..=10")));
        }
        let class: u8 = field(c_class_id)
            .parse()
            .map_err(|_| bad(format!("bad classID {:?}", field(c_class_id))))?;
        if class > 9 {
            return Err(bad(format!("classID {class} outside 0..=9")));
        }
        let name = field(c_class);
        if name != URBAN_CLASS_NAMES[class as usize] {
            return Err(bad(format!(
                "unknown class name {name:?} for classID {class} (expected {:?})",
                URBAN_CLASS_NAMES[class as usize]
            )));
        }

        let path = audio_root.join(format!("fold{fold}")).join(&file_name);
        if !seen_paths.insert(path.clone()) {
            return Err(bad(format!("duplicate path {path:?}")));
        }
        let source_id = Path::new(&file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file_name.clone());
        if !seen_ids.insert(source_id.clone()) {
            return Err(bad(format!("duplicate source id {source_id:?}")));
        }
        if !path.is_file() {
            missing.push(path.clone());
        }

        let origin_id = c_origin.map(|i| field(i)).filter(|s| !s.is_empty());
        let augment_set = match c_set.map(|i| field(i)).filter(|s| !s.is_empty()) {
            Some(tag) => Some(
                DeformationKind::from_tag(&tag)
                    .ok_or_else(|| bad(format!("unknown augment_set {tag:?}")))?,
            ),
            None => None,
        };

        max_class = max_class.max(class);
        entries.push(IndexEntry {
            path,
            file_name,
            source_id,
            class,
            fold,
            origin_id,
            augment_set,
        });
    }

    if entries.is_empty() {
        return Err(PipelineError::EmptyMetadata);
    }
    if !missing.is_empty() {
        let n = missing.len();
        for m in missing.iter().take(10) {
            log::error!("missing audio file {m:?}");
        }
        return Err(PipelineError::MissingFiles(n, missing.remove(0)));
    }

    // Variants must exist in the same fold and class as their origin.
    let by_id: HashMap<&str, (u8, u8)> = entries
        .iter()
        .map(|e| (e.source_id.as_str(), (e.fold, e.class)))
        .collect();
    for e in &entries {
        if let Some(origin) = &e.origin_id {
            match by_id.get(origin.as_str()) {
                Some(&(fold, class)) if fold == e.fold && class == e.class => {}
                Some(_) => {
                    return Err(PipelineError::Leakage(format!(
                        "variant {} disagrees with origin {origin} on fold or class",
                        e.source_id
                    )))
                }
                None => {
                    return Err(PipelineError::Leakage(format!(
                        "variant {} references unknown origin {origin}",
                        e.source_id
                    )))
                }
            }
        }
    }

    let class_names = URBAN_CLASS_NAMES[..=max_class as usize]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Ok(DatasetIndex {
        entries,
        class_names,
    })
}

/// Append-or-create a metadata CSV from entries (canonical columns).
pub(crate) fn write_metadata(entries: &[IndexEntry], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slice_file_name", "fold", "classID", "class", "origin", "augment_set"])?;
    for e in entries {
        w.write_record([
            e.file_name.as_str(),
            &e.fold.to_string(),
            &e.class.to_string(),
            URBAN_CLASS_NAMES[e.class as usize],
            e.origin_id.as_deref().unwrap_or(""),
            e.augment_set.map(|k| k.tag()).unwrap_or(""),
        ])?;
    }
    w.flush().map_err(PipelineError::Io)?;
    Ok(())
}

/// Tone-cluster centers per class, in Hz. Classes are separable by
/// construction: distinct fundamentals plus a 1.5x partial.
const SYNTH_BASE_HZ: [f64; 10] = [
    350.0, 500.0, 720.0, 1000.0, 1400.0, 2000.0, 2800.0, 4000.0, 5600.0, 8000.0,
];

const SYNTH_DURATION_S: f64 = 4.0;

/// Generate a separable synthetic dataset: per class, `n_per_class`
/// four-second clips of a detuned two-partial tone cluster plus noise,
/// written as float WAVs with folds assigned round-robin (1..=10).
/// Deterministic for a given seed.
pub fn synth_dataset(
    n_per_class: usize,
    n_classes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetIndex, PipelineError> {
    if n_per_class < 1 {
        return Err(PipelineError::InvalidArg("n_per_class must be >= 1".into()));
    }
    if !(1..=10).contains(&n_classes) {
        return Err(PipelineError::InvalidArg("n_classes must be in 1..=10".into()));
    }

    let audio_root = out_dir.join("audio");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (SYNTH_DURATION_S * CANONICAL_RATE as f64) as usize;
    let mut entries = Vec::with_capacity(n_per_class * n_classes);

    for class in 0..n_classes {
        let base = SYNTH_BASE_HZ[class];
        for i in 0..n_per_class {
            let fold = (i % 10) as u8 + 1;
            let detune1: f64 = rng.gen_range(0.98..1.02);
            let detune2: f64 = rng.gen_range(0.98..1.02);
            let gain: f64 = rng.gen_range(0.6..1.0);
            let phase1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let noise_amp: f64 = rng.gen_range(0.01..0.03);
            let f1 = base * detune1;
            let f2 = base * 1.5 * detune2;

            let samples: Vec<f32> = (0..len)
                .map(|t| {
                    let time = t as f64 / CANONICAL_RATE as f64;
                    let tone = 0.5 * (std::f64::consts::TAU * f1 * time + phase1).sin()
                        + 0.25 * (std::f64::consts::TAU * f2 * time + phase2).sin();
                    let noise: f64 = rng.gen_range(-1.0..1.0);
                    (gain * tone + noise_amp * noise) as f32
                })
                .collect();

            let file_name = format!("synth_c{class}_i{i:03}.wav");
            let fold_dir = audio_root.join(format!("fold{fold}"));
            std::fs::create_dir_all(&fold_dir)?;
            let path = fold_dir.join(&file_name);
            let clip = AudioClip::new(samples, CANONICAL_RATE, format!("synth_c{class}_i{i:03}"))
                .with_label(class as u8);
            write_wav(&clip, &path)?;

            entries.push(IndexEntry {
                path,
                source_id: clip.source_id.clone(),
                file_name,
                class: class as u8,
                fold,
                origin_id: None,
                augment_set: None,
            });
        }
    }

    let metadata = out_dir.join("metadata.csv");
    write_metadata(&entries, &metadata)?;
    load_index(&metadata, &audio_root)
}
