//! Diffusion-based synthesis: target-speaker mel-spectrograms from soft
//! unit sequences and a speaker embedding, with classifier-free guidance,
//! multi-speaker pretraining and few-shot adaptation.

mod model;
mod train;

pub use model::{DiffusionConfig, DiffusionDecoder, NoiseSchedule};
pub use train::{adapt_fewshot, pretrain_multispeaker, SynthItem, SynthRecipe, SynthTrainLog};

use crate::dsp::{mel_cepstrum, DspParams};
use crate::mat::Mat;
use crate::rng::Prng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("timestep out of range: {0}")]
    RangeError(String),
    #[error("empty input")]
    EmptyInput,
    #[error("config error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Ckpt(#[from] crate::ckpt::CkptError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    ToyStats,
    External,
}

/// Fixed-dimension speaker vector, unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Classifier-free guidance combination:
/// eps_hat = (1 + w) * eps_cond - w * eps_uncond,
/// computed as eps_cond + w * (eps_cond - eps_uncond) so both trivial
/// identities (w = 0, equal inputs) hold bit-exactly.
pub fn guided_noise(eps_cond: &Mat, eps_uncond: &Mat, w: f64) -> Result<Mat, SynthesisError> {
    if !eps_cond.same_shape(eps_uncond) {
        return Err(SynthesisError::ShapeError("guidance inputs differ in shape".into()));
    }
    let data = eps_cond
        .data
        .iter()
        .zip(&eps_uncond.data)
        .map(|(c, u)| c + w * (c - u))
        .collect();
    Ok(Mat::from_vec(eps_cond.rows, eps_cond.cols, data))
}

/// Linear time interpolation of unit rows to a target frame count; rows
/// stay on the simplex (renormalized against drift).
pub fn interpolate_units(units: &Mat, target_len: usize) -> Result<Mat, SynthesisError> {
    if units.rows == 0 || target_len == 0 {
        return Err(SynthesisError::EmptyInput);
    }
    if units.rows == target_len {
        return Ok(units.clone());
    }
    let mut out = Mat::zeros(target_len, units.cols);
    let scale = (units.rows - 1) as f64 / (target_len - 1).max(1) as f64;
    for t in 0..target_len {
        let pos = t as f64 * scale;
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(units.rows - 1);
        let frac = pos - i0 as f64;
        let row = out.row_mut(t);
        for c in 0..units.cols {
            row[c] = (1.0 - frac) * units.at(i0, c) + frac * units.at(i1, c);
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(out)
}

/// Speaker embedding from utterances.
///
/// Toy mode: L2-normalized fixed random projection of per-speaker mean and
/// standard deviation of mel-cepstra (c1..cD). The projection matrix is
/// derived from a constant seed so embeddings are stable across runs.
pub fn speaker_embedding(waveforms: &[Vec<f64>], dim: usize, dsp: &DspParams) -> Result<SpeakerEmbedding, SynthesisError> {
    if waveforms.is_empty() {
        return Err(SynthesisError::EmptyInput);
    }
    let d = dsp.mcep_order;
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    let mut n = 0usize;
    for w in waveforms {
        let mcep = mel_cepstrum(w, dsp)?;
        for t in 0..mcep.frames.rows {
            for i in 0..d {
                let v = mcep.frames.at(t, i + 1);
                sum[i] += v;
                sumsq[i] += v * v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(SynthesisError::EmptyInput);
    }
    let mut stats = Vec::with_capacity(2 * d);
    for i in 0..d {
        let mean = sum[i] / n as f64;
        stats.push(mean);
        stats.push((sumsq[i] / n as f64 - mean * mean).max(0.0).sqrt());
    }
    // Fixed projection: constant seed, independent of inputs.
    let mut rng = Prng::seed_from_u64(0xe1_bedd);
    let mut vector = vec![0.0; dim];
    for item in vector.iter_mut() {
        let mut acc = 0.0;
        for &s in &stats {
            acc += rng.normal() * s;
        }
        *item = acc;
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    vector.iter_mut().for_each(|v| *v /= norm);
    Ok(SpeakerEmbedding {
        vector,
        source: EmbeddingSource::ToyStats,
    })
}

/// File-backed (externally computed) speaker embedding, renormalized.
pub fn speaker_embedding_from_file(path: &std::path::Path) -> Result<SpeakerEmbedding, SynthesisError> {
    let mat = crate::io::read_matrix(path).map_err(|e| SynthesisError::ConfigError(e.to_string()))?;
    let mut vector = mat.data;
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(SynthesisError::ConfigError("degenerate external embedding".into()));
    }
    vector.iter_mut().for_each(|v| *v /= norm);
    Ok(SpeakerEmbedding {
        vector,
        source: EmbeddingSource::External,
    })
}
