//! Griffin-Lim reconstruction from log-mel spectrograms.

use super::stft::{istft, mel_filterbank, stft};
use super::{DspError, DspParams, MelSpectrogram};
use crate::mat::Mat;
use realfft::num_complex::Complex;

const MEL_INVERSION_STEPS: usize = 80;

/// Magnitude leakage kernel of the analysis window at integer bin offsets.
///
/// An isolated spectral line produces |X(b)| = a * |W(b - b0)|; modeling
/// this blur lets the inversion place narrowband energy at the right bin
/// instead of at a mel filter center.
fn leakage_kernel(frame_len: usize, n_fft: usize, half_width: usize) -> Vec<f64> {
    let window = super::stft::hann_window(frame_len);
    let mut kernel = Vec::with_capacity(half_width + 1);
    for k in 0..=half_width {
        let omega = 2.0 * std::f64::consts::PI * k as f64 / n_fft as f64;
        let mut re = 0.0;
        let mut im = 0.0;
        for (i, &w) in window.iter().enumerate() {
            re += w * (omega * i as f64).cos();
            im -= w * (omega * i as f64).sin();
        }
        kernel.push((re * re + im * im).sqrt());
    }
    let norm = kernel[0];
    kernel.iter_mut().for_each(|v| *v /= norm);
    kernel
}

/// Applies the symmetric leakage blur to a line spectrum.
fn blur(lines: &[f64], kernel: &[f64], out: &mut [f64]) {
    let bins = lines.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (b0, &a) in lines.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (k, &w) in kernel.iter().enumerate() {
            if b0 + k < bins {
                out[b0 + k] += a * w;
            }
            if k > 0 && b0 >= k {
                out[b0 - k] += a * w;
            }
        }
    }
}

/// Nonnegative linear-magnitude estimate from mel magnitudes.
///
/// Multiplicative (Richardson-Lucy style) updates of `F L s = mel` where
/// F is the filterbank and L the window leakage blur; the returned linear
/// spectrum is `L s`. The combined deconvolution keeps narrowband content
/// localized within a filter cell.
fn mel_to_linear(mel_mag: &Mat, fb: &Mat, frame_len: usize, n_fft: usize) -> Mat {
    let bins = fb.cols;
    let n_mels = fb.rows;
    let eps = 1e-12;
    let kernel = leakage_kernel(frame_len, n_fft, 4);
    // Combined operator C = F L, built column by column through the blur.
    let mut combined = Mat::zeros(n_mels, bins);
    {
        let mut unit = vec![0.0; bins];
        let mut blurred = vec![0.0; bins];
        for b0 in 0..bins {
            unit[b0] = 1.0;
            blur(&unit, &kernel, &mut blurred);
            unit[b0] = 0.0;
            for m in 0..n_mels {
                let fb_row = fb.row(m);
                let mut acc = 0.0;
                for b in b0.saturating_sub(4)..(b0 + 5).min(bins) {
                    acc += fb_row[b] * blurred[b];
                }
                combined.data[m * bins + b0] = acc;
            }
        }
    }
    let mut col_sum = vec![0.0; bins];
    for m in 0..n_mels {
        for (b, &w) in combined.row(m).iter().enumerate() {
            col_sum[b] += w;
        }
    }
    let mut linear = Mat::zeros(mel_mag.rows, bins);
    let mut lines = vec![0.0; bins];
    let mut projected = vec![0.0; n_mels];
    let mut back = vec![0.0; bins];
    for t in 0..mel_mag.rows {
        let target = mel_mag.row(t);
        let init = (target.iter().sum::<f64>() / bins as f64).max(eps);
        lines.iter_mut().for_each(|v| *v = init);
        for _ in 0..MEL_INVERSION_STEPS {
            for (m, p) in projected.iter_mut().enumerate() {
                let c_row = combined.row(m);
                let mut acc = 0.0;
                for b in 0..bins {
                    acc += c_row[b] * lines[b];
                }
                *p = acc;
            }
            back.iter_mut().for_each(|v| *v = 0.0);
            for m in 0..n_mels {
                let r = target[m] / (projected[m] + eps);
                if r == 0.0 {
                    continue;
                }
                for (b, &w) in combined.row(m).iter().enumerate() {
                    back[b] += w * r;
                }
            }
            for b in 0..bins {
                if col_sum[b] > eps {
                    lines[b] *= back[b] / col_sum[b];
                }
            }
        }
        blur(&lines, &kernel, linear.row_mut(t));
    }
    linear
}

/// Iterative phase reconstruction from a log-mel spectrogram.
///
/// Each iteration re-estimates phase by analyzing the current waveform and
/// re-imposing the target magnitudes; the returned waveform's re-analysis
/// error decreases with the iteration count.
pub fn griffin_lim(mel: &MelSpectrogram, iterations: usize) -> Result<Vec<f64>, DspError> {
    if iterations == 0 {
        return Err(DspError::InvalidInput("iterations must be >= 1".into()));
    }
    if !mel.frames.is_finite() {
        return Err(DspError::InvalidInput("non-finite mel input".into()));
    }
    let params = DspParams {
        sample_rate: mel.sample_rate,
        n_mels: mel.n_mels,
        frame_length: (mel.frame_length_ms * mel.sample_rate as f64 / 1000.0).round() as usize,
        frame_shift: (mel.frame_shift_ms * mel.sample_rate as f64 / 1000.0).round() as usize,
        ..DspParams::default()
    };
    let fb = mel_filterbank(params.sample_rate, params.n_fft, params.n_mels);
    let mel_mag = mel.frames.map(f64::exp);
    let target = mel_to_linear(&mel_mag, &fb, params.frame_length, params.n_fft);
    let bins = params.n_fft / 2 + 1;
    let t_frames = target.rows;

    // Random phase init from a fixed seed: deterministic, but avoids the
    // pulse-train fixed point that zero phase converges to.
    let mut rng = crate::rng::Prng::seed_from_u64(0x6772_6c70);
    let mut spectra: Vec<Vec<Complex<f64>>> = (0..t_frames)
        .map(|t| {
            target
                .row(t)
                .iter()
                .enumerate()
                .map(|(b, &m)| {
                    let phase = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
                    // DC and Nyquist must stay real for the inverse transform.
                    if b == 0 || b == bins - 1 {
                        Complex::new(m, 0.0)
                    } else {
                        Complex::from_polar(m, phase)
                    }
                })
                .collect()
        })
        .collect();
    let mut waveform = Vec::new();
    for _ in 0..iterations {
        waveform = istft(&spectra, params.frame_length, params.frame_shift, params.n_fft);
        let reanalysis = stft(&waveform, params.frame_length, params.frame_shift, params.n_fft);
        for (t, frame) in reanalysis.iter().enumerate().take(t_frames) {
            let mag_row = target.row(t);
            for b in 0..bins {
                let c = frame[b];
                let norm = c.norm();
                spectra[t][b] = if norm > 1e-12 {
                    c / norm * mag_row[b]
                } else {
                    Complex::new(mag_row[b], 0.0)
                };
            }
        }
    }
    let _ = waveform;
    Ok(istft(&spectra, params.frame_length, params.frame_shift, params.n_fft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel_spectrogram;

    fn sine(freq: f64, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (16000.0 * seconds) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect()
    }

    fn dominant_frequency(x: &[f64], sample_rate: f64) -> f64 {
        let n = x.len().next_power_of_two();
        let mut planner = realfft::RealFftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf = vec![0.0; n];
        buf[..x.len()].copy_from_slice(x);
        let mut spec = fft.make_output_vec();
        fft.process(&mut buf, &mut spec).unwrap();
        let peak = spec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
            .unwrap()
            .0;
        peak as f64 * sample_rate / n as f64
    }

    #[test]
    fn sine_reconstruction_keeps_dominant_frequency() {
        let params = DspParams::default();
        let original = sine(440.0, 0.5, 0.6);
        let mel = mel_spectrogram(&original, &params).unwrap();
        let rec = griffin_lim(&mel, 30).unwrap();
        let freq = dominant_frequency(&rec, 16000.0);
        assert!((freq - 440.0).abs() <= 10.0, "dominant at {freq} Hz");
    }

    #[test]
    fn silence_mel_gives_near_silent_output() {
        let params = DspParams::default();
        let mel = mel_spectrogram(&vec![0.0; 8000], &params).unwrap();
        let rec = griffin_lim(&mel, 10).unwrap();
        let rms = (rec.iter().map(|v| v * v).sum::<f64>() / rec.len() as f64).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn rejects_non_finite_input() {
        let params = DspParams::default();
        let mut mel = mel_spectrogram(&sine(200.0, 0.2, 0.2), &params).unwrap();
        mel.frames.data[0] = f64::NAN;
        assert!(matches!(
            griffin_lim(&mel, 5),
            Err(DspError::InvalidInput(_))
        ));
    }

    #[test]
    fn reanalysis_error_decreases_with_iterations() {
        let params = DspParams::default();
        // A harmonic-plus-noise signal, closer to corpus material than a sine.
        let mut rng = crate::rng::Prng::seed_from_u64(9);
        let x: Vec<f64> = (0..8000)
            .map(|i| {
                let t = i as f64 / 16000.0;
                let mut v = 0.0;
                for h in 1..=8 {
                    v += 0.2 / h as f64 * (2.0 * std::f64::consts::PI * 160.0 * h as f64 * t).sin();
                }
                v + 0.01 * rng.normal()
            })
            .collect();
        let mel = mel_spectrogram(&x, &params).unwrap();
        let mut errs = Vec::new();
        for iters in [10, 30, 60] {
            let rec = griffin_lim(&mel, iters).unwrap();
            let re = mel_spectrogram(&rec[..x.len().min(rec.len())], &params).unwrap();
            let t = re.frames.rows.min(mel.frames.rows);
            let mut mae = 0.0;
            for i in 0..t * mel.frames.cols {
                mae += (re.frames.data[i] - mel.frames.data[i]).abs();
            }
            errs.push(mae / (t * mel.frames.cols) as f64);
        }
        assert!(errs[1] <= errs[0] + 1e-9, "{errs:?}");
        assert!(errs[2] <= errs[1] + 1e-9, "{errs:?}");
    }
}
