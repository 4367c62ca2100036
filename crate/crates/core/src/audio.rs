//! Audio ingestion and resampling.
//!
//! Every downstream stage works on mono waveforms at [`CANONICAL_RATE`].
//! Loading averages multi-channel input down to one channel and scales
//! integer PCM to [-1, 1]; resampling is windowed-sinc band-limited
//! interpolation.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Canonical pipeline sample rate in Hz. All clips are resampled to this
/// rate on ingestion so the frame arithmetic downstream is fixed.
pub const CANONICAL_RATE: u32 = 44_100;

/// Half-width of the windowed-sinc resampling kernel, in zero crossings.
/// Larger values sharpen the band edge at higher cost; 32 keeps aliasing
/// well below the tolerances used anywhere in the pipeline.
pub const SINC_HALF_WIDTH: usize = 32;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed or unsupported WAV {path}: {detail}")]
    BadFormat { path: PathBuf, detail: String },
    #[error("cannot write {path}: {source}")]
    WriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("clip has no samples")]
    EmptyClip,
    #[error("sample rate must be positive")]
    InvalidRate,
}

/// A mono waveform plus the metadata the pipeline carries alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// Amplitude values, nominal range [-1, 1].
    pub samples: Vec<f32>,
    /// Samples per second.
    pub sample_rate: u32,
    /// Identifier of the originating file (file stem by convention).
    pub source_id: String,
    /// Class index 0-9 when known.
    pub class_label: Option<u8>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        AudioClip {
            samples,
            sample_rate,
            source_id: source_id.into(),
            class_label: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.class_label = Some(label);
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a PCM WAV file (8/16/24/32-bit integer or 32-bit float, any
/// channel count) into a mono clip at the file's native rate.
///
/// Multi-channel input is averaged across channels; integer samples are
/// scaled to [-1, 1] by the type's full-scale value.
pub fn load_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound_error(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(AudioError::BadFormat {
            path: path.to_path_buf(),
            detail: "zero channels".into(),
        });
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(AudioError::BadFormat {
                    path: path.to_path_buf(),
                    detail: format!("{}-bit float is unsupported", spec.bits_per_sample),
                });
            }
            reader
                .samples::<f32>()
                .collect::<Result<_, _>>()
                .map_err(|e| map_hound_error(path, e))?
        }
        hound::SampleFormat::Int => {
            let full_scale = match spec.bits_per_sample {
                8 => 1i64 << 7,
                16 => 1i64 << 15,
                24 => 1i64 << 23,
                32 => 1i64 << 31,
                bits => {
                    return Err(AudioError::BadFormat {
                        path: path.to_path_buf(),
                        detail: format!("{bits}-bit integer is unsupported"),
                    })
                }
            } as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / full_scale))
                .collect::<Result<_, _>>()
                .map_err(|e| map_hound_error(path, e))?
        }
    };

    let samples = downmix(&interleaved, spec.channels as usize);
    if samples.is_empty() {
        return Err(AudioError::BadFormat {
            path: path.to_path_buf(),
            detail: "file contains no samples".into(),
        });
    }

    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip::new(samples, spec.sample_rate, source_id))
}

/// Write a clip as a 32-bit float mono WAV. Lossless: reading the file
/// back reproduces the samples exactly.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    if clip.samples.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    if clip.sample_rate == 0 {
        return Err(AudioError::InvalidRate);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::WriteFailed {
            path: path.to_path_buf(),
            source,
        },
        other => AudioError::BadFormat {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)?;
    Ok(())
}

/// Average interleaved channels into one. With k identical channels the
/// result equals any single channel exactly.
pub fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels <= 1 {
        return interleaved.to_vec();
    }
    // f64 accumulation keeps the mean of identical channels exact.
    interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / frame.len() as f64) as f32)
        .collect()
}

/// Resample a clip to `target_rate` with band-limited windowed-sinc
/// interpolation. Duration is preserved within one sample period; equal
/// rates return the clip unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate);
    }
    if clip.samples.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((clip.samples.len() as f64 / ratio).round() as usize).max(1);
    let samples = sinc_resample(&clip.samples, ratio, out_len);
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
        source_id: clip.source_id.clone(),
        class_label: clip.class_label,
    })
}

/// Interpolate `input` onto `out_len` points spaced `ratio` input samples
/// apart, low-passed at the narrower of the two Nyquist bands.
///
/// This is the shared kernel behind [`resample`] and the pitch shifter's
/// length correction.
pub fn sinc_resample(input: &[f32], ratio: f64, out_len: usize) -> Vec<f32> {
    assert!(ratio > 0.0 && ratio.is_finite());
    // Cutoff relative to the input Nyquist; below 1 only when decimating.
    let cutoff = (1.0 / ratio).min(1.0);
    let half_width = SINC_HALF_WIDTH as f64 / cutoff;
    let n = input.len() as isize;

    (0..out_len)
        .map(|j| {
            let center = j as f64 * ratio;
            let lo = (center - half_width).ceil() as isize;
            let hi = (center + half_width).floor() as isize;
            let mut acc = 0.0f64;
            for k in lo.max(0)..=hi.min(n - 1) {
                let t = k as f64 - center;
                acc += input[k as usize] as f64 * sinc_kernel(t, cutoff, half_width);
            }
            acc as f32
        })
        .collect()
}

fn sinc_kernel(t: f64, cutoff: f64, half_width: f64) -> f64 {
    let window = 0.5 * (1.0 + (std::f64::consts::PI * t / half_width).cos());
    cutoff * sinc(cutoff * t) * window
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn map_hound_error(path: &Path, e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(source) => AudioError::Unreadable {
            path: path.to_path_buf(),
            source,
        },
        other => AudioError::BadFormat {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize) -> Vec<f32> {
        (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn stereo_constant_downmixes_to_half_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(16_384i16).unwrap();
            w.write_sample(16_384i16).unwrap();
        }
        w.finalize().unwrap();

        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 100);
        for &s in &clip.samples {
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn one_second_has_rate_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sec.wav");
        let clip = AudioClip::new(sine(440.0, 44_100, 44_100), 44_100, "sec");
        write_wav(&clip, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples.len(), 44_100);
        assert_eq!(back.sample_rate, 44_100);
    }

    #[test]
    fn all_zero_file_loads_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.wav");
        write_wav(&AudioClip::new(vec![0.0; 1000], 22_050, "z"), &path).unwrap();
        let clip = load_wav(&path).unwrap();
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn missing_file_reports_unreadable() {
        let err = load_wav(Path::new("/nonexistent/file.wav")).unwrap_err();
        assert!(matches!(err, AudioError::Unreadable { .. }));
    }

    #[test]
    fn garbage_file_reports_bad_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.wav");
        std::fs::write(&path, b"not a wav file at all").unwrap();
        let err = load_wav(&path).unwrap_err();
        assert!(matches!(err, AudioError::BadFormat { .. }));
    }

    #[test]
    fn float_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let mut clip = AudioClip::new(sine(997.0, 44_100, 4_410), 44_100, "rt");
        clip.samples[7] = -0.12345;
        write_wav(&clip, &path).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples, clip.samples);
        assert_eq!(back.sample_rate, clip.sample_rate);
    }

    #[test]
    fn empty_clip_write_is_rejected_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        let err = write_wav(&AudioClip::new(vec![], 44_100, "e"), &path).unwrap_err();
        assert!(matches!(err, AudioError::EmptyClip));
        assert!(!path.exists());
    }

    #[test]
    fn upsample_doubles_length() {
        let clip = AudioClip::new(sine(440.0, 22_050, 22_050), 22_050, "u");
        let up = resample(&clip, 44_100).unwrap();
        assert!((up.samples.len() as i64 - 44_100).unsigned_abs() <= 1);
        assert_eq!(up.sample_rate, 44_100);
    }

    #[test]
    fn identical_rate_is_identity() {
        let clip = AudioClip::new(sine(440.0, 44_100, 1000), 44_100, "i");
        let same = resample(&clip, 44_100).unwrap();
        assert_eq!(same.samples, clip.samples);
    }

    #[test]
    fn resample_duration_roundtrip_within_two_periods() {
        for &(r1, r2) in &[(44_100u32, 22_050u32), (44_100, 48_000), (8_000, 44_100)] {
            let clip = AudioClip::new(sine(300.0, 44_100, 13_230), 44_100, "d");
            let there = resample(&clip, r1).unwrap();
            let back = resample(&there, r2).unwrap();
            let diff = (back.duration_s() - clip.duration_s()).abs();
            assert!(
                diff <= 2.0 / r1.min(r2).min(clip.sample_rate) as f64,
                "duration drift {diff} for {r1}->{r2}"
            );
        }
    }

    #[test]
    fn downmix_of_identical_channels_is_identity() {
        let ch: Vec<f32> = sine(123.0, 8_000, 64);
        for k in 1..=4usize {
            let mut interleaved = Vec::new();
            for &s in &ch {
                for _ in 0..k {
                    interleaved.push(s);
                }
            }
            let mono = downmix(&interleaved, k);
            assert_eq!(mono, ch, "k={k}");
        }
    }

    #[test]
    fn zero_target_rate_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 10], 44_100, "r");
        assert!(matches!(resample(&clip, 0), Err(AudioError::InvalidRate)));
    }
}
