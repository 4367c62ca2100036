//! Phase-vocoder time-scale modification.
//!
//! Analysis: Hann-windowed STFT, FFT size 2048, hop 512. Synthesis runs
//! the same frames at a hop of `512 / factor` with per-bin phase
//! propagation, then overlap-adds and renormalizes by the summed squared
//! window. Output length is pinned to `round(input_len / factor)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Analysis FFT length.
pub const FFT_SIZE: usize = 2048;
/// Analysis hop.
pub const ANALYSIS_HOP: usize = 512;

/// Time-stretch `input` by `factor` (> 1 speeds up: output length is
/// `round(len / factor)`), keeping pitch unchanged.
pub fn time_stretch_samples(input: &[f32], factor: f64) -> Vec<f32> {
    assert!(factor > 0.0 && factor.is_finite());
    let target_len = ((input.len() as f64 / factor).round() as usize).max(1);
    let syn_hop = ((ANALYSIS_HOP as f64 / factor).round() as usize).max(1);

    // One frame minimum; short inputs analyze as a single padded frame.
    let n_frames = input.len().div_ceil(ANALYSIS_HOP).max(1);
    let window: Vec<f64> = (0..FFT_SIZE)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / FFT_SIZE as f64).cos()))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let ifft = planner.plan_fft_inverse(FFT_SIZE);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len())];

    let half = FFT_SIZE / 2 + 1;
    let mut prev_phase = vec![0.0f64; half];
    let mut phase_accum = vec![0.0f64; half];

    let out_natural = (n_frames - 1) * syn_hop + FFT_SIZE;
    let mut out = vec![0.0f64; out_natural];
    let mut window_sum = vec![0.0f64; out_natural];

    let mut frame = vec![Complex::default(); FFT_SIZE];
    for f in 0..n_frames {
        let start = f * ANALYSIS_HOP;
        for i in 0..FFT_SIZE {
            let s = input.get(start + i).copied().unwrap_or(0.0) as f64;
            frame[i] = Complex::new(s * window[i], 0.0);
        }
        fft.process_with_scratch(&mut frame, &mut scratch);

        // Propagate phases: keep each bin's instantaneous frequency,
        // advance it by the synthesis hop.
        let mut synth = vec![Complex::default(); FFT_SIZE];
        for k in 0..half {
            let mag = frame[k].norm();
            let phase = frame[k].arg();
            if f == 0 {
                phase_accum[k] = phase;
            } else {
                let expected = 2.0 * PI * k as f64 * ANALYSIS_HOP as f64 / FFT_SIZE as f64;
                let deviation = princarg(phase - prev_phase[k] - expected);
                let inst = (expected + deviation) * syn_hop as f64 / ANALYSIS_HOP as f64;
                phase_accum[k] = princarg(phase_accum[k] + inst);
            }
            prev_phase[k] = phase;
            let c = Complex::from_polar(mag, phase_accum[k]);
            synth[k] = c;
            if k > 0 && k < FFT_SIZE / 2 {
                synth[FFT_SIZE - k] = c.conj();
            }
        }

        ifft.process_with_scratch(&mut synth, &mut scratch);
        let pos = f * syn_hop;
        let scale = 1.0 / FFT_SIZE as f64;
        for i in 0..FFT_SIZE {
            out[pos + i] += synth[i].re * scale * window[i];
            window_sum[pos + i] += window[i] * window[i];
        }
    }

    for (o, &w) in out.iter_mut().zip(window_sum.iter()) {
        if w > 1e-8 {
            *o /= w;
        }
    }

    let mut result: Vec<f32> = out.iter().map(|&v| v as f32).collect();
    result.resize(target_len, 0.0);
    result
}

/// Principal argument: wrap to (-pi, pi].
fn princarg(x: f64) -> f64 {
    x - 2.0 * PI * (x / (2.0 * PI)).round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn princarg_wraps() {
        assert!((princarg(3.0 * PI) - PI).abs() < 1e-12 || (princarg(3.0 * PI) + PI).abs() < 1e-12);
        assert!((princarg(0.3) - 0.3).abs() < 1e-12);
        assert!((princarg(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn output_length_is_pinned() {
        let input = vec![0.1f32; 44_100];
        for &f in &[0.81f64, 0.93, 1.0, 1.07, 1.23] {
            let out = time_stretch_samples(&input, f);
            assert_eq!(out.len(), (44_100f64 / f).round() as usize, "factor {f}");
        }
    }

    #[test]
    fn short_input_still_produces_target_length() {
        let input = vec![0.5f32; 300];
        let out = time_stretch_samples(&input, 1.23);
        assert_eq!(out.len(), (300f64 / 1.23).round() as usize);
    }
}
