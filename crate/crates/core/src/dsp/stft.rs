//! Short-time analysis primitives shared by the feature extractors and
//! the Griffin-Lim reconstruction.

use crate::mat::Mat;
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame count for non-padded analysis: floor((len - frame_len)/shift) + 1.
pub fn frame_count(signal_len: usize, frame_len: usize, shift: usize) -> usize {
    if signal_len < frame_len {
        0
    } else {
        (signal_len - frame_len) / shift + 1
    }
}

/// Complex STFT: frames start at t*shift, windowed and zero-padded to n_fft.
pub fn stft(signal: &[f64], frame_len: usize, shift: usize, n_fft: usize) -> Vec<Vec<Complex<f64>>> {
    debug_assert!(n_fft >= frame_len);
    let t = frame_count(signal.len(), frame_len, shift);
    let window = hann_window(frame_len);
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Vec::with_capacity(t);
    let mut buf = vec![0.0; n_fft];
    for frame in 0..t {
        let start = frame * shift;
        buf.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..frame_len {
            buf[i] = signal[start + i] * window[i];
        }
        let mut spectrum = fft.make_output_vec();
        fft.process(&mut buf, &mut spectrum).expect("fft sizes fixed");
        out.push(spectrum);
    }
    out
}

/// Magnitude spectrogram, T x (n_fft/2 + 1).
pub fn magnitude_spectrogram(signal: &[f64], frame_len: usize, shift: usize, n_fft: usize) -> Mat {
    let frames = stft(signal, frame_len, shift, n_fft);
    let bins = n_fft / 2 + 1;
    let mut mat = Mat::zeros(frames.len(), bins);
    for (t, spec) in frames.iter().enumerate() {
        for (b, c) in spec.iter().enumerate() {
            mat.data[t * bins + b] = c.norm();
        }
    }
    mat
}

/// Least-squares inverse STFT (overlap-add with squared-window normalization).
pub fn istft(frames: &[Vec<Complex<f64>>], frame_len: usize, shift: usize, n_fft: usize) -> Vec<f64> {
    let t = frames.len();
    if t == 0 {
        return Vec::new();
    }
    let window = hann_window(frame_len);
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let out_len = (t - 1) * shift + frame_len;
    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut time = vec![0.0; n_fft];
    for (idx, frame) in frames.iter().enumerate() {
        let mut spec = frame.clone();
        ifft.process(&mut spec, &mut time).expect("ifft sizes fixed");
        let start = idx * shift;
        for i in 0..frame_len {
            // realfft inverse is unnormalized.
            let sample = time[i] / n_fft as f64;
            acc[start + i] += sample * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (a, n) in acc.iter_mut().zip(&norm) {
        if *n > 1e-8 {
            *a /= n;
        }
    }
    acc
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, n_mels x (n_fft/2 + 1), peak weight 1.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Mat {
    let bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 edge points, uniform in mel.
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Mat::zeros(n_mels, bins);
    let bin_hz = sample_rate as f64 / n_fft as f64;
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb.data[m * bins + b] = w;
        }
    }
    fb
}

/// Filter response of each mel filter to a pure tone at `hz`, from the
/// filterbank definition alone (test oracle helper).
pub fn mel_filter_weights_at(sample_rate: u32, n_mels: usize, hz: f64) -> Vec<f64> {
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            if hz <= lo || hz >= hi {
                0.0
            } else if hz <= center {
                (hz - lo) / (center - lo)
            } else {
                (hi - hz) / (hi - center)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 100.0, 440.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn stft_istft_reconstructs_interior() {
        let signal: Vec<f64> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * 313.0 * i as f64 / 16000.0).sin() * 0.4)
            .collect();
        let frames = stft(&signal, 400, 160, 512);
        let rec = istft(&frames, 400, 160, 512);
        // Interior samples (full overlap coverage) must match closely.
        for i in 400..rec.len().min(signal.len()) - 400 {
            assert!(
                (rec[i] - signal[i]).abs() < 1e-8,
                "sample {i}: {} vs {}",
                rec[i],
                signal[i]
            );
        }
    }

    #[test]
    fn filterbank_rows_cover_spectrum() {
        let fb = mel_filterbank(16000, 512, 80);
        for m in 0..80 {
            let sum: f64 = fb.row(m).iter().sum();
            assert!(sum > 0.0, "filter {m} empty");
        }
    }
}
