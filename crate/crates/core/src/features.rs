//! Log-mel spectrograms and fixed-size time-frequency patches.
//!
//! The analysis chain is STFT magnitude -> power -> triangular mel
//! filterbank -> natural log with an epsilon floor. Build constants:
//! Hann window (periodic), window and hop of 1024 samples at 44.1 kHz,
//! 128 mel bands over 0-22050 Hz on the HTK mel scale, filterbank applied
//! to the power spectrum, log floor 1e-10.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{AudioClip, CANONICAL_RATE};

/// STFT window length in samples (23 ms at 44.1 kHz).
pub const WINDOW_SIZE: usize = 1024;
/// STFT hop in samples; equal to the window so frames tile the signal.
pub const HOP_SIZE: usize = 1024;
/// Mel band count.
pub const N_BANDS: usize = 128;
/// Spectrum bins per frame: WINDOW_SIZE / 2 + 1.
pub const N_BINS: usize = WINDOW_SIZE / 2 + 1;
/// Upper edge of the analyzed band in Hz.
pub const F_MAX: f64 = 22_050.0;
/// Floor added to mel energies before the log; guarantees finite output.
pub const LOG_FLOOR: f32 = 1e-10;
/// Patch extent in frames and bands.
pub const PATCH_FRAMES: usize = 128;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip is empty")]
    EmptyClip,
    #[error("clip rate {actual} Hz differs from the canonical {expected} Hz")]
    WrongRate { actual: u32, expected: u32 },
    #[error("f_max {f_max} Hz exceeds Nyquist {nyquist} Hz")]
    BandAboveNyquist { f_max: f64, nyquist: f64 },
    #[error("need at least one mel band")]
    NoBands,
    #[error("patch start {start} out of range (valid 0..={max})")]
    StartOutOfRange { start: usize, max: usize },
    #[error("cannot read spectrogram {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write spectrogram {path}: {source}")]
    WriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed spectrogram container {path}: {detail}")]
    BadContainer { path: PathBuf, detail: String },
}

/// Log-scaled mel spectrogram, shape (n_frames, n_bands).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// Log mel energies, rows are time frames.
    pub values: Array2<f32>,
    /// Frame hop in seconds.
    pub frame_hop_s: f32,
    pub source_id: String,
    pub class_label: Option<u8>,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.values.ncols()
    }
}

/// A (PATCH_FRAMES, N_BANDS) slice of a spectrogram; the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct TFPatch {
    /// Shape (PATCH_FRAMES, N_BANDS), ordered (time, mel band).
    pub values: Array2<f32>,
    /// Frame offset into the source spectrogram.
    pub start_frame: usize,
    pub source_id: String,
    pub class_label: Option<u8>,
}

/// Magnitude STFT over Hann-windowed segments starting every `hop`
/// samples; the final partial segment is zero-padded. Output shape is
/// (ceil(len / hop), window_size / 2 + 1).
pub fn stft_magnitude(
    samples: &[f32],
    window_size: usize,
    hop: usize,
) -> Result<Array2<f32>, FeatureError> {
    if samples.is_empty() {
        return Err(FeatureError::EmptyClip);
    }
    let n_frames = samples.len().div_ceil(hop);
    let n_bins = window_size / 2 + 1;
    let window = hann(window_size);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(window_size);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut frame = vec![Complex::default(); window_size];

    let mut out = Array2::zeros((n_frames, n_bins));
    for (f, mut row) in out.rows_mut().into_iter().enumerate() {
        let start = f * hop;
        for i in 0..window_size {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            frame[i] = Complex::new(s * window[i], 0.0);
        }
        fft.process_with_scratch(&mut frame, &mut scratch);
        for (b, v) in row.iter_mut().enumerate() {
            *v = frame[b].norm();
        }
    }
    Ok(out)
}

/// Periodic Hann window.
pub fn hann(size: usize) -> Vec<f32> {
    (0..size)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / size as f64).cos()) as f32)
        .collect()
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, shape (n_bands, n_bins). Filter centers are
/// equally spaced on the mel scale between `f_min` and `f_max`.
///
/// Each weight is the average of the triangle over the FFT bin's
/// frequency cell rather than a point sample at the bin center, so every
/// filter keeps at least one positive weight even where triangles are
/// narrower than a bin.
pub fn mel_filterbank(
    n_bins: usize,
    n_bands: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Array2<f32>, FeatureError> {
    let nyquist = sample_rate as f64 / 2.0;
    if f_max > nyquist {
        return Err(FeatureError::BandAboveNyquist { f_max, nyquist });
    }
    if n_bands < 1 {
        return Err(FeatureError::NoBands);
    }

    let n_fft = 2 * (n_bins - 1);
    let bin_width = sample_rate as f64 / n_fft as f64;
    let mel_lo = hz_to_mel(f_min);
    let mel_hi = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_bands + 1) as f64))
        .collect();

    let mut fb = Array2::zeros((n_bands, n_bins));
    for band in 0..n_bands {
        let (left, center, right) = (edges[band], edges[band + 1], edges[band + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * bin_width;
            let cell_lo = (f - bin_width / 2.0).max(0.0);
            let cell_hi = (f + bin_width / 2.0).min(nyquist);
            if cell_hi <= cell_lo {
                continue;
            }
            let w = triangle_cell_average(left, center, right, cell_lo, cell_hi);
            if w > 0.0 {
                fb[(band, bin)] = w as f32;
            }
        }
    }
    Ok(fb)
}

/// Average of the triangle (left, center, right) over [lo, hi].
fn triangle_cell_average(left: f64, center: f64, right: f64, lo: f64, hi: f64) -> f64 {
    // Integral of a linear ramp over the overlap, one segment at a time.
    fn seg(a: f64, b: f64, va: impl Fn(f64) -> f64) -> f64 {
        if b <= a {
            0.0
        } else {
            (va(a) + va(b)) / 2.0 * (b - a)
        }
    }
    let rising = seg(lo.max(left), hi.min(center), |x| {
        if center > left {
            (x - left) / (center - left)
        } else {
            0.0
        }
    });
    let falling = seg(lo.max(center), hi.min(right), |x| {
        if right > center {
            (right - x) / (right - center)
        } else {
            0.0
        }
    });
    (rising + falling) / (hi - lo)
}

/// Log-scaled mel spectrogram of a clip at the canonical rate:
/// `ln(filterbank . power_spectrum + LOG_FLOOR)` per frame.
pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram, FeatureError> {
    if clip.sample_rate != CANONICAL_RATE {
        return Err(FeatureError::WrongRate {
            actual: clip.sample_rate,
            expected: CANONICAL_RATE,
        });
    }
    let mag = stft_magnitude(&clip.samples, WINDOW_SIZE, HOP_SIZE)?;
    let fb = mel_filterbank(N_BINS, N_BANDS, CANONICAL_RATE, 0.0, F_MAX)?;

    let power = mag.mapv(|m| m * m);
    let mut mel = power.dot(&fb.t());
    mel.mapv_inplace(|e| (e + LOG_FLOOR).ln());

    Ok(MelSpectrogram {
        values: mel,
        frame_hop_s: HOP_SIZE as f32 / CANONICAL_RATE as f32,
        source_id: clip.source_id.clone(),
        class_label: clip.class_label,
    })
}

/// Number of distinct patch start positions for a spectrogram of
/// `n_frames` frames (1 for short spectrograms, which get padded).
pub fn patch_count(n_frames: usize) -> usize {
    if n_frames >= PATCH_FRAMES {
        n_frames - PATCH_FRAMES + 1
    } else {
        1
    }
}

/// Extract the 128-frame patch starting at `start_frame`. Spectrograms
/// shorter than a patch are padded at the end with the log floor (zero
/// pre-log energy) and only `start_frame == 0` is valid.
pub fn extract_patch(spec: &MelSpectrogram, start_frame: usize) -> Result<TFPatch, FeatureError> {
    let n = spec.n_frames();
    let max_start = n.saturating_sub(PATCH_FRAMES);
    if start_frame > max_start {
        return Err(FeatureError::StartOutOfRange {
            start: start_frame,
            max: max_start,
        });
    }
    let mut values = Array2::from_elem((PATCH_FRAMES, spec.n_bands()), LOG_FLOOR.ln());
    let rows = PATCH_FRAMES.min(n - start_frame);
    values
        .slice_mut(ndarray::s![..rows, ..])
        .assign(&spec.values.slice(ndarray::s![start_frame..start_frame + rows, ..]));
    Ok(TFPatch {
        values,
        start_frame,
        source_id: spec.source_id.clone(),
        class_label: spec.class_label,
    })
}

/// All patches at 1-frame hop; short spectrograms yield exactly one
/// padded patch.
pub fn all_patches(spec: &MelSpectrogram) -> Vec<TFPatch> {
    (0..patch_count(spec.n_frames()))
        .map(|s| extract_patch(spec, s).expect("start within patch_count is valid"))
        .collect()
}

const CONTAINER_MAGIC: &[u8; 4] = b"SBML";
const CONTAINER_VERSION: u16 = 1;

/// Write a spectrogram to the binary cache container: header (magic,
/// version, little-endian flag, label, shape, hop, source id) followed by
/// the row-major float32 payload.
pub fn write_spectrogram(spec: &MelSpectrogram, path: &Path) -> Result<(), FeatureError> {
    let wf = |source: std::io::Error| FeatureError::WriteFailed {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::with_capacity(32 + spec.values.len() * 4);
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.push(b'L');
    buf.push(spec.class_label.unwrap_or(u8::MAX));
    buf.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_bands() as u32).to_le_bytes());
    buf.extend_from_slice(&spec.frame_hop_s.to_le_bytes());
    let id = spec.source_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    for &v in spec.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(wf)?;
    file.write_all(&buf).map_err(wf)?;
    Ok(())
}

/// Read a spectrogram written by [`write_spectrogram`].
pub fn read_spectrogram(path: &Path) -> Result<MelSpectrogram, FeatureError> {
    let rf = |source: std::io::Error| FeatureError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let bad = |detail: &str| FeatureError::BadContainer {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(rf)?.read_to_end(&mut bytes).map_err(rf)?;

    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], FeatureError> {
        if at + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };

    if take(4)? != CONTAINER_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if take(1)?[0] != b'L' {
        return Err(bad("unsupported endianness"));
    }
    let label = take(1)?[0];
    let n_frames = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let n_bands = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let hop = f32::from_le_bytes(take(4)?.try_into().unwrap());
    let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let source_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("bad source id"))?;

    let n = n_frames
        .checked_mul(n_bands)
        .ok_or_else(|| bad("shape overflow"))?;
    let payload = take(n * 4)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((n_frames, n_bands), data).map_err(|_| bad("bad shape"))?;
    Ok(MelSpectrogram {
        values,
        frame_hop_s: hop,
        source_id,
        class_label: if label == u8::MAX { None } else { Some(label) },
    })
}
