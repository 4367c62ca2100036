//! Signal generators and measurement oracles used by the test suites.
//!
//! Everything here is deliberately independent of the production DSP
//! paths: frequency measurement is a direct (brute-force) DFT, not the
//! FFT-based analysis the pipeline uses, so it can serve as an oracle
//! for it.

use crate::audio::AudioClip;

/// Pure sine at `freq` Hz, `amp` peak amplitude.
pub fn sine_clip(freq: f64, amp: f64, duration_s: f64, sample_rate: u32) -> AudioClip {
    let len = (duration_s * sample_rate as f64).round() as usize;
    let samples = (0..len)
        .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin()) as f32)
        .collect();
    AudioClip::new(samples, sample_rate, format!("sine{freq}"))
}

/// Direct DFT magnitude of `samples` at a single frequency (Goertzel-style
/// correlation, Hann windowed).
pub fn dft_magnitude_at(samples: &[f32], sample_rate: u32, freq: f64) -> f64 {
    let n = samples.len();
    let mut re = 0.0f64;
    let mut im = 0.0f64;
    for (i, &s) in samples.iter().enumerate() {
        let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
        let phase = -2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64;
        re += s as f64 * w * phase.cos();
        im += s as f64 * w * phase.sin();
    }
    (re * re + im * im).sqrt()
}

/// Dominant frequency of a signal, measured by a coarse direct DFT sweep
/// followed by a fine sweep around the winning bin. Accurate to about
/// 0.25 Hz for clean tones.
pub fn dominant_frequency(samples: &[f32], sample_rate: u32) -> f64 {
    // Analyze a centered window to avoid onset/tail artifacts.
    let win = samples.len().min(16_384);
    let start = (samples.len() - win) / 2;
    let segment = &samples[start..start + win];

    let coarse_bins = 2_048usize;
    let coarse_step = sample_rate as f64 / 2.0 / coarse_bins as f64;
    let mut best_freq = 0.0;
    let mut best_mag = -1.0;
    for b in 0..coarse_bins {
        let f = b as f64 * coarse_step;
        let m = dft_magnitude_at(segment, sample_rate, f);
        if m > best_mag {
            best_mag = m;
            best_freq = f;
        }
    }

    let mut fine_best = best_freq;
    let mut fine_mag = best_mag;
    let mut f = (best_freq - 1.5 * coarse_step).max(0.0);
    let end = best_freq + 1.5 * coarse_step;
    while f <= end {
        let m = dft_magnitude_at(segment, sample_rate, f);
        if m > fine_mag {
            fine_mag = m;
            fine_best = f;
        }
        f += 0.25;
    }
    fine_best
}

/// Root-mean-square level of a sample slice.
pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_finds_a_pure_tone() {
        let clip = sine_clip(440.0, 0.8, 1.0, 44_100);
        let f = dominant_frequency(&clip.samples, 44_100);
        assert!((f - 440.0).abs() < 1.0, "measured {f}");
    }

    #[test]
    fn oracle_resolution_suffices_for_one_percent_checks() {
        for &target in &[359.46f64, 493.88, 1000.0, 4500.0] {
            let clip = sine_clip(target, 0.5, 1.0, 44_100);
            let f = dominant_frequency(&clip.samples, 44_100);
            assert!((f - target).abs() / target < 0.002, "target {target} measured {f}");
        }
    }
}
