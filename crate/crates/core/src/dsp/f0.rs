//! Autocorrelation F0 tracking.

use super::{DspError, DspParams, F0Track};
use crate::dsp::stft::frame_count;

/// F0 extraction with a normalized-autocorrelation voicing decision.
///
/// Frames are positioned exactly like the spectral extractors (same shift,
/// same count) but analyzed over a longer window so the lowest search pitch
/// still fits two periods. To avoid subharmonic picks on strongly periodic
/// input, the reported lag is the smallest one whose correlation is within
/// 2% of the frame maximum, refined by parabolic interpolation.
pub fn extract_f0(waveform: &[f64], params: &DspParams) -> Result<F0Track, DspError> {
    let need = 2 * params.frame_length;
    if waveform.len() < need {
        return Err(DspError::InputTooShort {
            got: waveform.len(),
            need,
        });
    }
    let t_frames = frame_count(waveform.len(), params.frame_length, params.frame_shift);
    let win = params.f0_window;
    let lag_min = (params.sample_rate as f64 / params.f0_max_hz).floor() as usize;
    let lag_max = (params.sample_rate as f64 / params.f0_min_hz).ceil() as usize;
    let mut f0_hz = vec![0.0; t_frames];
    let mut voiced = vec![false; t_frames];

    let mut frame = vec![0.0; win];
    for t in 0..t_frames {
        let start = t * params.frame_shift;
        for (i, v) in frame.iter_mut().enumerate() {
            *v = waveform.get(start + i).copied().unwrap_or(0.0);
        }
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        if energy < 1e-8 {
            continue;
        }
        // Normalized autocorrelation over the lag search range.
        let mut corr = vec![0.0; lag_max + 2];
        for lag in lag_min.saturating_sub(1)..=(lag_max + 1).min(win - 1) {
            let n = win - lag;
            let mut num = 0.0;
            let mut e0 = 0.0;
            let mut e1 = 0.0;
            for i in 0..n {
                num += frame[i] * frame[i + lag];
                e0 += frame[i] * frame[i];
                e1 += frame[i + lag] * frame[i + lag];
            }
            let denom = (e0 * e1).sqrt();
            corr[lag] = if denom > 1e-12 { num / denom } else { 0.0 };
        }
        // Interior local maxima only: peaks at the search boundary cannot
        // be refined and are classic transition-frame artifacts.
        let hi = lag_max.min(win - 2);
        let peaks: Vec<usize> = (lag_min..hi)
            .filter(|&l| corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1])
            .collect();
        let best = peaks
            .iter()
            .map(|&l| corr[l])
            .fold(f64::NEG_INFINITY, f64::max);
        if peaks.is_empty() || best < params.voicing_threshold {
            continue;
        }
        // Smallest peak close to the global one beats its subharmonics.
        let lag = *peaks
            .iter()
            .find(|&&l| corr[l] >= 0.98 * best)
            .expect("best peak qualifies");
        let (c_m, c_0, c_p) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let denom = c_m - 2.0 * c_0 + c_p;
        let delta = if denom.abs() > 1e-12 {
            (0.5 * (c_m - c_p) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let f0 = params.sample_rate as f64 / (lag as f64 + delta);
        if f0 >= params.f0_min_hz && f0 <= params.f0_max_hz {
            f0_hz[t] = f0;
            voiced[t] = true;
        }
    }
    Ok(F0Track { f0_hz, voiced })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_tone_is_tracked_tightly() {
        let params = DspParams::default();
        let x: Vec<f64> = (0..16000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin())
            .collect();
        let track = extract_f0(&x, &params).unwrap();
        let voiced_frames = track.voiced.iter().filter(|&&v| v).count();
        assert!(
            voiced_frames as f64 >= 0.95 * track.voiced.len() as f64,
            "only {voiced_frames}/{} voiced",
            track.voiced.len()
        );
        for (t, (&f, &v)) in track.f0_hz.iter().zip(&track.voiced).enumerate() {
            if v {
                assert!((217.0..=223.0).contains(&f), "frame {t}: {f} Hz");
            }
        }
    }

    #[test]
    fn silence_is_fully_unvoiced() {
        let params = DspParams::default();
        let track = extract_f0(&vec![0.0; 16000], &params).unwrap();
        assert!(track.voiced.iter().all(|&v| !v));
        assert!(track.f0_hz.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn voicing_mask_matches_f0_positivity() {
        let params = DspParams::default();
        let mut x: Vec<f64> = (0..8000)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * 150.0 * i as f64 / 16000.0).sin())
            .collect();
        x.extend(std::iter::repeat(0.0).take(8000));
        let track = extract_f0(&x, &params).unwrap();
        for (f, v) in track.f0_hz.iter().zip(&track.voiced) {
            assert_eq!(*f > 0.0, *v);
        }
        assert!(track.voiced.iter().any(|&v| v));
        assert!(track.voiced.iter().any(|&v| !v));
    }

    #[test]
    fn harmonic_stack_resolves_fundamental_not_subharmonic() {
        // Rich harmonic source at 130 Hz: all harmonics present.
        let params = DspParams::default();
        let x: Vec<f64> = (0..16000)
            .map(|i| {
                let t = i as f64 / 16000.0;
                (1..=20)
                    .map(|h| {
                        0.3 / h as f64
                            * (2.0 * std::f64::consts::PI * 130.0 * h as f64 * t).sin()
                    })
                    .sum::<f64>()
            })
            .collect();
        let track = extract_f0(&x, &params).unwrap();
        let voiced = track.voiced_values();
        assert!(!voiced.is_empty());
        for f in voiced {
            assert!((f - 130.0).abs() < 3.0, "got {f} Hz");
        }
    }
}
