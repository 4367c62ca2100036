//! Dynamic range compression.
//!
//! Feed-forward compressor with a dB-domain envelope follower. The four
//! preset parameterizations are artifact definitions collected in one
//! table; the preset names follow common broadcast usage.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrcPreset {
    MusicStandard,
    FilmStandard,
    Speech,
    Radio,
}

impl DrcPreset {
    pub const ALL: [DrcPreset; 4] = [
        DrcPreset::MusicStandard,
        DrcPreset::FilmStandard,
        DrcPreset::Speech,
        DrcPreset::Radio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DrcPreset::MusicStandard => "music_standard",
            DrcPreset::FilmStandard => "film_standard",
            DrcPreset::Speech => "speech",
            DrcPreset::Radio => "radio",
        }
    }

    pub fn from_name(name: &str) -> Option<DrcPreset> {
        DrcPreset::ALL.into_iter().find(|p| p.name() == name)
    }

    /// (threshold dBFS, ratio, attack ms, release ms, makeup dB).
    pub fn params(self) -> CompressorParams {
        match self {
            DrcPreset::MusicStandard => CompressorParams::new(-20.0, 2.0, 10.0, 100.0, 4.0),
            DrcPreset::FilmStandard => CompressorParams::new(-24.0, 2.5, 5.0, 150.0, 5.0),
            DrcPreset::Speech => CompressorParams::new(-18.0, 3.0, 3.0, 80.0, 3.0),
            DrcPreset::Radio => CompressorParams::new(-15.0, 4.0, 1.0, 50.0, 6.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressorParams {
    pub threshold_db: f64,
    pub ratio: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
    pub makeup_db: f64,
}

impl CompressorParams {
    const fn new(threshold_db: f64, ratio: f64, attack_ms: f64, release_ms: f64, makeup_db: f64) -> Self {
        CompressorParams {
            threshold_db,
            ratio,
            attack_ms,
            release_ms,
            makeup_db,
        }
    }
}

/// Compress the clip's dynamic range with the given preset. Output length
/// equals input length exactly; the effect is sample-synchronous.
pub fn drc(clip: &AudioClip, preset: DrcPreset) -> AudioClip {
    let p = preset.params();
    let sr = clip.sample_rate as f64;
    let attack_coeff = coeff(p.attack_ms, sr);
    let release_coeff = coeff(p.release_ms, sr);
    let makeup = 10f64.powf(p.makeup_db / 20.0);
    let slope = 1.0 / p.ratio - 1.0;

    let mut envelope_db = 0.0f64; // dB above threshold, >= 0
    let samples = clip
        .samples
        .iter()
        .map(|&x| {
            let level_db = 20.0 * (x.abs() as f64).max(1e-10).log10();
            let over_db = (level_db - p.threshold_db).max(0.0);
            let c = if over_db > envelope_db { attack_coeff } else { release_coeff };
            envelope_db = over_db + c * (envelope_db - over_db);
            let gain = 10f64.powf(envelope_db * slope / 20.0) * makeup;
            (x as f64 * gain) as f32
        })
        .collect();

    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
        class_label: clip.class_label,
    }
}

fn coeff(time_ms: f64, sample_rate: f64) -> f64 {
    (-1.0 / (time_ms * 1e-3 * sample_rate)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms(s: &[f32]) -> f64 {
        (s.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
    }

    /// 20 dB two-level step: half a second at 0.9, half at 0.09.
    fn step_clip() -> AudioClip {
        let sr = 44_100usize;
        let mut samples = Vec::with_capacity(sr);
        for i in 0..sr {
            let amp = if i < sr / 2 { 0.9 } else { 0.09 };
            let t = i as f64 / sr as f64;
            samples.push((amp * (2.0 * std::f64::consts::PI * 440.0 * t).sin()) as f32);
        }
        AudioClip::new(samples, 44_100, "step")
    }

    #[test]
    fn silence_stays_silent() {
        let silent = AudioClip::new(vec![0.0; 10_000], 44_100, "s");
        for preset in DrcPreset::ALL {
            let out = drc(&silent, preset);
            assert!(out.samples.iter().all(|&s| s == 0.0), "{preset:?}");
        }
    }

    #[test]
    fn every_preset_narrows_a_20db_step() {
        let clip = step_clip();
        let n = clip.samples.len();
        // Skip the attack transient at each segment head when measuring.
        let loud_in = rms(&clip.samples[n / 8..n / 2]);
        let quiet_in = rms(&clip.samples[n / 2 + n / 8..]);
        let in_ratio = loud_in / quiet_in;
        for preset in DrcPreset::ALL {
            let out = drc(&clip, preset);
            let loud_out = rms(&out.samples[n / 8..n / 2]);
            let quiet_out = rms(&out.samples[n / 2 + n / 8..]);
            let out_ratio = loud_out / quiet_out;
            assert!(
                out_ratio < in_ratio,
                "{preset:?}: {out_ratio:.2} !< {in_ratio:.2}"
            );
        }
    }

    #[test]
    fn duration_is_preserved_exactly() {
        let clip = step_clip();
        for preset in DrcPreset::ALL {
            assert_eq!(drc(&clip, preset).samples.len(), clip.samples.len());
        }
    }

    #[test]
    fn preset_names_roundtrip() {
        for preset in DrcPreset::ALL {
            assert_eq!(DrcPreset::from_name(preset.name()), Some(preset));
        }
        assert_eq!(DrcPreset::from_name("loudness_war"), None);
    }
}
