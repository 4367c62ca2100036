//! Label-preserving audio deformations.
//!
//! Five deformation sets, four parameterizations each: time stretching
//! (phase vocoder), two pitch-shift ranges (vocoder stretch followed by
//! resampling back to the original length), dynamic range compression,
//! and background-scene mixing `z = (1-w)x + wy`. Every application
//! produces a manifest recording the realized parameters.

mod drc;
mod vocoder;

pub use drc::{drc, CompressorParams, DrcPreset};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{sinc_resample, AudioClip, AudioError};

/// Time-stretch factors; > 1 speeds the clip up.
pub const TIME_STRETCH_FACTORS: [f64; 4] = [0.81, 0.93, 1.07, 1.23];
/// First pitch-shift set, in semitones.
pub const PITCH_SHIFT_1_SEMITONES: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
/// Second, wider pitch-shift set, in semitones.
pub const PITCH_SHIFT_2_SEMITONES: [f64; 4] = [-3.5, -2.5, 2.5, 3.5];
/// Background mix weight is drawn uniformly from this closed range.
pub const BG_WEIGHT_RANGE: (f64, f64) = (0.1, 0.5);
/// Deformations per augmentation set.
pub const VARIANTS_PER_SET: usize = 4;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("stretch factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
    #[error("semitone shift must be finite, got {0}")]
    InvalidSemitones(f64),
    #[error("background scene has no samples")]
    EmptyScene,
    #[error("mix weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("no background clip with source id {0:?}")]
    UnknownScene(String),
    #[error("invalid deformation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeformationKind {
    TimeStretch,
    PitchShift1,
    PitchShift2,
    Drc,
    BackgroundNoise,
}

impl DeformationKind {
    pub const ALL: [DeformationKind; 5] = [
        DeformationKind::TimeStretch,
        DeformationKind::PitchShift1,
        DeformationKind::PitchShift2,
        DeformationKind::Drc,
        DeformationKind::BackgroundNoise,
    ];

    /// Short set tag used in file names, manifests and reports.
    pub fn tag(self) -> &'static str {
        match self {
            DeformationKind::TimeStretch => "ts",
            DeformationKind::PitchShift1 => "ps1",
            DeformationKind::PitchShift2 => "ps2",
            DeformationKind::Drc => "drc",
            DeformationKind::BackgroundNoise => "bg",
        }
    }

    pub fn from_tag(tag: &str) -> Option<DeformationKind> {
        DeformationKind::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeformationParam {
    Factor(f64),
    Semitones(f64),
    Preset(DrcPreset),
    Background { scene_id: String },
}

/// One requested deformation: which set, which parameter value, and the
/// seed for any stochastic parameters (the background mix weight and
/// scene offset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub kind: DeformationKind,
    pub parameter: DeformationParam,
    pub rng_seed: Option<u64>,
}

impl DeformationSpec {
    /// Check the parameter against the fixed per-set value tables.
    pub fn validate(&self) -> Result<(), AugmentError> {
        let ok = match (&self.kind, &self.parameter) {
            (DeformationKind::TimeStretch, DeformationParam::Factor(f)) => {
                TIME_STRETCH_FACTORS.contains(f)
            }
            (DeformationKind::PitchShift1, DeformationParam::Semitones(s)) => {
                PITCH_SHIFT_1_SEMITONES.contains(s)
            }
            (DeformationKind::PitchShift2, DeformationParam::Semitones(s)) => {
                PITCH_SHIFT_2_SEMITONES.contains(s)
            }
            (DeformationKind::Drc, DeformationParam::Preset(_)) => true,
            (DeformationKind::BackgroundNoise, DeformationParam::Background { .. }) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(AugmentError::InvalidSpec(format!(
                "{:?} does not admit {:?}",
                self.kind, self.parameter
            )))
        }
    }
}

/// Concrete parameter values realized for one deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RealizedParams {
    TimeStretch { factor: f64 },
    PitchShift { semitones: f64 },
    Drc { preset: DrcPreset },
    Background { scene_id: String, weight: f64, scene_offset: usize },
}

/// Sidecar record written for every deformed clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationManifest {
    pub source_id: String,
    pub output_id: String,
    pub set: DeformationKind,
    pub params: RealizedParams,
}

/// Slow down or speed up a clip while keeping pitch unchanged. `factor`
/// greater than one speeds up: output duration is `duration / factor`.
pub fn time_stretch(clip: &AudioClip, factor: f64) -> Result<AudioClip, AugmentError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AugmentError::InvalidFactor(factor));
    }
    let samples = vocoder::time_stretch_samples(&clip.samples, factor);
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
        class_label: clip.class_label,
    })
}

/// Raise or lower pitch by `semitones` while preserving duration: vocoder
/// stretch by `2^(-s/12)` followed by band-limited resampling back to the
/// original sample count.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip, AugmentError> {
    if !semitones.is_finite() {
        return Err(AugmentError::InvalidSemitones(semitones));
    }
    let rate = 2f64.powf(semitones / 12.0);
    let stretched = vocoder::time_stretch_samples(&clip.samples, 1.0 / rate);
    let out_len = clip.samples.len();
    let ratio = stretched.len() as f64 / out_len as f64;
    let samples = sinc_resample(&stretched, ratio, out_len);
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
        class_label: clip.class_label,
    })
}

/// Mix a background scene into the clip: `z_i = (1-w) x_i + w y_i` over
/// the clip's length. Scenes shorter than the clip are looped; longer
/// scenes are read from their start (callers pick an offset first).
pub fn mix_background(clip: &AudioClip, scene: &AudioClip, w: f64) -> Result<AudioClip, AugmentError> {
    if scene.samples.is_empty() {
        return Err(AugmentError::EmptyScene);
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(AugmentError::InvalidWeight(w));
    }
    let scene_len = scene.samples.len();
    let samples = clip
        .samples
        .iter()
        .enumerate()
        .map(|(i, &x)| ((1.0 - w) * x as f64 + w * scene.samples[i % scene_len] as f64) as f32)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
        class_label: clip.class_label,
    })
}

/// Apply one deformation, dispatching on the spec. The class label is
/// copied unchanged and the manifest records every realized parameter.
pub fn apply(
    clip: &AudioClip,
    spec: &DeformationSpec,
    backgrounds: &[AudioClip],
) -> Result<(AudioClip, AugmentationManifest), AugmentError> {
    spec.validate()?;
    let (mut out, output_id, params) = match (&spec.kind, &spec.parameter) {
        (DeformationKind::TimeStretch, DeformationParam::Factor(f)) => (
            time_stretch(clip, *f)?,
            format!("{}_ts{}", clip.source_id, f),
            RealizedParams::TimeStretch { factor: *f },
        ),
        (kind @ (DeformationKind::PitchShift1 | DeformationKind::PitchShift2), DeformationParam::Semitones(s)) => (
            pitch_shift(clip, *s)?,
            format!("{}_{}{:+}", clip.source_id, kind.tag(), s),
            RealizedParams::PitchShift { semitones: *s },
        ),
        (DeformationKind::Drc, DeformationParam::Preset(p)) => (
            drc(clip, *p),
            format!("{}_drc_{}", clip.source_id, p.name()),
            RealizedParams::Drc { preset: *p },
        ),
        (DeformationKind::BackgroundNoise, DeformationParam::Background { scene_id }) => {
            let scene = backgrounds
                .iter()
                .find(|b| &b.source_id == scene_id)
                .ok_or_else(|| AugmentError::UnknownScene(scene_id.clone()))?;
            let scene = if scene.sample_rate == clip.sample_rate {
                scene.clone()
            } else {
                crate::audio::resample(scene, clip.sample_rate)?
            };
            let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed.unwrap_or(0));
            let w = rng.gen_range(BG_WEIGHT_RANGE.0..=BG_WEIGHT_RANGE.1);
            let offset = if scene.samples.len() > clip.samples.len() {
                rng.gen_range(0..=scene.samples.len() - clip.samples.len())
            } else {
                0
            };
            let positioned = AudioClip {
                samples: scene.samples[offset..].to_vec(),
                ..scene.clone()
            };
            // Seed suffix keeps ids distinct when scenes repeat across
            // the four variants.
            let seed_tag = spec.rng_seed.unwrap_or(0) as u32;
            (
                mix_background(clip, &positioned, w)?,
                format!("{}_bg_{}_{:08x}", clip.source_id, scene_id, seed_tag),
                RealizedParams::Background {
                    scene_id: scene_id.clone(),
                    weight: w,
                    scene_offset: offset,
                },
            )
        }
        _ => unreachable!("validate() rejects mismatched kind/parameter"),
    };

    out.source_id = output_id.clone();
    out.class_label = clip.class_label;
    let manifest = AugmentationManifest {
        source_id: clip.source_id.clone(),
        output_id,
        set: spec.kind,
        params,
    };
    Ok((out, manifest))
}

/// The four specs of one augmentation set. Background specs cycle through
/// the provided scene ids; seeds are derived from `base_seed` so repeated
/// runs realize the same weights and offsets.
pub fn paper_specs(
    kind: DeformationKind,
    scene_ids: &[String],
    base_seed: u64,
) -> Vec<DeformationSpec> {
    match kind {
        DeformationKind::TimeStretch => TIME_STRETCH_FACTORS
            .iter()
            .map(|&f| DeformationSpec {
                kind,
                parameter: DeformationParam::Factor(f),
                rng_seed: None,
            })
            .collect(),
        DeformationKind::PitchShift1 => PITCH_SHIFT_1_SEMITONES
            .iter()
            .map(|&s| DeformationSpec {
                kind,
                parameter: DeformationParam::Semitones(s),
                rng_seed: None,
            })
            .collect(),
        DeformationKind::PitchShift2 => PITCH_SHIFT_2_SEMITONES
            .iter()
            .map(|&s| DeformationSpec {
                kind,
                parameter: DeformationParam::Semitones(s),
                rng_seed: None,
            })
            .collect(),
        DeformationKind::Drc => DrcPreset::ALL
            .iter()
            .map(|&p| DeformationSpec {
                kind,
                parameter: DeformationParam::Preset(p),
                rng_seed: None,
            })
            .collect(),
        DeformationKind::BackgroundNoise => (0..VARIANTS_PER_SET)
            .map(|i| DeformationSpec {
                kind,
                parameter: DeformationParam::Background {
                    scene_id: scene_ids[i % scene_ids.len().max(1)].clone(),
                },
                rng_seed: Some(base_seed.wrapping_add(i as u64)),
            })
            .collect(),
    }
}
