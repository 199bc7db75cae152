//! Deterministic feature extraction and inversion: mel-spectrograms,
//! mel-cepstra, F0 tracks, and Griffin-Lim waveform reconstruction.
//!
//! All extractors are pure functions: the same waveform and parameters
//! give bit-identical outputs regardless of run or thread context.

mod f0;
mod griffin;
pub mod stft;

pub use f0::extract_f0;
pub use griffin::griffin_lim;

use crate::mat::Mat;
use stft::{magnitude_spectrogram, mel_filterbank};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Shared analysis settings (16 kHz speech defaults).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DspParams {
    pub sample_rate: u32,
    /// Analysis frame length in samples (25 ms).
    pub frame_length: usize,
    /// Frame shift in samples (10 ms).
    pub frame_shift: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    /// Magnitudes are floored here before the log.
    pub log_floor: f64,
    /// Mel-cepstral order D (coefficients c0..cD).
    pub mcep_order: usize,
    /// All-pass warping factor for the mel-cepstrum.
    pub mcep_alpha: f64,
    /// Warped-axis sample count for the cepstral transform.
    pub mcep_points: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// F0 analysis window in samples (longer than the feature frame so the
    /// lowest pitch fits at least two periods).
    pub f0_window: usize,
    /// Normalized-autocorrelation voicing threshold.
    pub voicing_threshold: f64,
}

impl Default for DspParams {
    fn default() -> Self {
        DspParams {
            sample_rate: 16000,
            frame_length: 400,
            frame_shift: 160,
            n_fft: 512,
            n_mels: 80,
            log_floor: 1e-10,
            mcep_order: 24,
            mcep_alpha: 0.42,
            mcep_points: 64,
            f0_min_hz: 50.0,
            f0_max_hz: 600.0,
            f0_window: 800,
            voicing_threshold: 0.3,
        }
    }
}

/// Log-mel energies, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Mat,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    pub n_mels: usize,
    pub sample_rate: u32,
}

/// Mel-cepstral coefficients c0..cD, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct McepSequence {
    pub frames: Mat,
}

impl McepSequence {
    pub fn order(&self) -> usize {
        self.frames.cols - 1
    }
}

/// Frame-level F0 with voicing mask; f0_hz is 0 exactly where unvoiced.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn voiced_values(&self) -> Vec<f64> {
        self.f0_hz
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect()
    }
}

/// Log-mel spectrogram of a waveform.
pub fn mel_spectrogram(waveform: &[f64], params: &DspParams) -> Result<MelSpectrogram, DspError> {
    if waveform.len() < params.frame_length {
        return Err(DspError::InputTooShort {
            got: waveform.len(),
            need: params.frame_length,
        });
    }
    let mag = magnitude_spectrogram(waveform, params.frame_length, params.frame_shift, params.n_fft);
    let fb = mel_filterbank(params.sample_rate, params.n_fft, params.n_mels);
    let mel = mag.matmul_nt(&fb);
    let frames = mel.map(|v| v.max(params.log_floor).ln());
    Ok(MelSpectrogram {
        frames,
        frame_shift_ms: params.frame_shift as f64 * 1000.0 / params.sample_rate as f64,
        frame_length_ms: params.frame_length as f64 * 1000.0 / params.sample_rate as f64,
        n_mels: params.n_mels,
        sample_rate: params.sample_rate,
    })
}

/// Frequency warp of the all-pass transform with factor `alpha`.
///
/// Maps linear angular frequency in [0, pi] to the warped axis; the inverse
/// warp is the same map with -alpha.
fn warp(omega: f64, alpha: f64) -> f64 {
    omega + 2.0 * (alpha * omega.sin() / (1.0 - alpha * omega.cos())).atan()
}

/// Mel-cepstral analysis, frame-synchronous with [`mel_spectrogram`].
///
/// Per frame: log magnitude spectrum, resampled on a uniform grid of the
/// alpha-warped frequency axis, then a DCT-II truncated at the cepstral
/// order. Gain sits entirely in c0.
pub fn mel_cepstrum(waveform: &[f64], params: &DspParams) -> Result<McepSequence, DspError> {
    if waveform.len() < params.frame_length {
        return Err(DspError::InputTooShort {
            got: waveform.len(),
            need: params.frame_length,
        });
    }
    let mag = magnitude_spectrogram(waveform, params.frame_length, params.frame_shift, params.n_fft);
    let bins = params.n_fft / 2 + 1;
    let m_points = params.mcep_points;
    let order = params.mcep_order;
    // Linear-frequency positions of the uniform warped grid, precomputed.
    let grid: Vec<f64> = (0..m_points)
        .map(|m| {
            let warped = std::f64::consts::PI * (m as f64 + 0.5) / m_points as f64;
            warp(warped, -params.mcep_alpha)
        })
        .collect();
    let mut out = Mat::zeros(mag.rows, order + 1);
    let mut log_warped = vec![0.0; m_points];
    for t in 0..mag.rows {
        let row = mag.row(t);
        for (m, &omega) in grid.iter().enumerate() {
            // Linear interpolation of log|X| on the FFT grid.
            let pos = omega / std::f64::consts::PI * (bins - 1) as f64;
            let i0 = (pos.floor() as usize).min(bins - 1);
            let i1 = (i0 + 1).min(bins - 1);
            let frac = pos - i0 as f64;
            let a = row[i0].max(params.log_floor).ln();
            let b = row[i1].max(params.log_floor).ln();
            log_warped[m] = a + frac * (b - a);
        }
        let out_row = out.row_mut(t);
        for (d, coeff) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &lw) in log_warped.iter().enumerate() {
                acc += lw * (std::f64::consts::PI * d as f64 * (m as f64 + 0.5) / m_points as f64).cos();
            }
            *coeff = if d == 0 {
                acc / m_points as f64
            } else {
                2.0 * acc / m_points as f64
            };
        }
    }
    Ok(McepSequence { frames: out })
}
