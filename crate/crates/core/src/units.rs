//! Soft content units: a compact stand-in for pretrained soft-unit
//! extractors, producing dense speaker-reduced linguistic targets.
//!
//! A codebook is k-means over standardized mel-cepstral frames (c1..cD,
//! gain excluded) of typical speech; extraction emits per-frame softmax
//! assignments over centroid distances. An external adapter serves
//! precomputed unit matrices with the same interface.

use crate::corpus::{Manifest, SpeechType};
use crate::dsp::{mel_cepstrum, DspParams};
use crate::io::{read_matrix, IoError};
use crate::mat::{euclidean, Mat};
use crate::rng::Prng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UnitsError {
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("no units for utterance {0}")]
    MissingUtterance(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("feature extraction failed: {0}")]
    Dsp(#[from] crate::dsp::DspError),
}

/// Soft unit activations, one probability-like row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub frames: Mat,
    pub frame_shift_ms: f64,
}

/// K-means codebook plus the distance-to-assignment projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitCodebook {
    pub centroids: Mat,
    pub temperature: f64,
    /// Per-dimension standardization of the base feature space.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub frame_shift_ms: f64,
    /// Final k-means inertia (mean squared distance to assigned centroid).
    pub inertia: f64,
}

impl UnitCodebook {
    pub fn n_units(&self) -> usize {
        self.centroids.rows
    }

    pub fn save(&self, path: &Path) -> Result<(), UnitsError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| IoError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let json = serde_json::to_string(self).map_err(|e| UnitsError::ConfigError(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| {
            UnitsError::Io(IoError::Io {
                path: path.display().to_string(),
                source: e,
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self, UnitsError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| UnitsError::ConfigError(e.to_string()))
    }
}

/// Base features for unit modeling: standardized c1..cD (gain excluded).
fn base_features(waveform: &[f64], dsp: &DspParams) -> Result<Mat, UnitsError> {
    let mcep = mel_cepstrum(waveform, dsp)?;
    let d = mcep.frames.cols - 1;
    let mut out = Mat::zeros(mcep.frames.rows, d);
    for t in 0..mcep.frames.rows {
        out.row_mut(t).copy_from_slice(&mcep.frames.row(t)[1..]);
    }
    Ok(out)
}

fn standardize_row(row: &mut [f64], mean: &[f64], std: &[f64]) {
    for (i, v) in row.iter_mut().enumerate() {
        *v = (*v - mean[i]) / std[i];
    }
}

/// K-means over pooled frames; k-means++ seeding, Lloyd iterations with
/// deterministic tie-breaking.
pub fn fit_from_frames(frames: &Mat, k: usize, seed: u64, temperature: f64, frame_shift_ms: f64) -> Result<UnitCodebook, UnitsError> {
    let n = frames.rows;
    let dim = frames.cols;
    if k == 0 || k > n {
        return Err(UnitsError::ConfigError(format!(
            "k = {k} must be in 1..={n} (frame count)"
        )));
    }
    // Standardize.
    let mut mean = vec![0.0; dim];
    for t in 0..n {
        for (i, &v) in frames.row(t).iter().enumerate() {
            mean[i] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; dim];
    for t in 0..n {
        for (i, &v) in frames.row(t).iter().enumerate() {
            std[i] += (v - mean[i]) * (v - mean[i]);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt().max(1e-6));
    let mut data = frames.clone();
    for t in 0..n {
        standardize_row(data.row_mut(t), &mean, &std);
    }

    // k-means++ seeding.
    let mut rng = Prng::seed_from_u64(seed);
    let mut centroids = Mat::zeros(k, dim);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for t in 0..n {
            let d = euclidean(data.row(t), centroids.row(c - 1));
            if d * d < d2[t] {
                d2[t] = d * d;
            }
        }
        let total: f64 = d2.iter().sum();
        let mut pick = rng.uniform() * total;
        let mut chosen = n - 1;
        for (t, &w) in d2.iter().enumerate() {
            pick -= w;
            if pick <= 0.0 {
                chosen = t;
                break;
            }
        }
        centroids.row_mut(c).copy_from_slice(data.row(chosen));
    }

    // Lloyd iterations.
    let mut assignment = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for _iter in 0..30 {
        let mut changed = false;
        let mut total = 0.0;
        for t in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = euclidean(data.row(t), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            total += best_d * best_d;
            if assignment[t] != best {
                assignment[t] = best;
                changed = true;
            }
        }
        inertia = total / n as f64;
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for t in 0..n {
            let c = assignment[t];
            counts[c] += 1;
            for (i, &v) in data.row(t).iter().enumerate() {
                sums.data[c * dim + i] += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for i in 0..dim {
                    centroids.data[c * dim + i] = sums.data[c * dim + i] / counts[c] as f64;
                }
            }
        }
    }
    Ok(UnitCodebook {
        centroids,
        temperature,
        feature_mean: mean,
        feature_std: std,
        frame_shift_ms,
        inertia,
    })
}

/// Fits the codebook on typical-speech frames from the manifest's train
/// split. Frames are subsampled to a deterministic cap for speed.
pub fn fit_unit_extractor(manifest: &Manifest, k: usize, seed: u64, dsp: &DspParams) -> Result<UnitCodebook, UnitsError> {
    let typical = manifest.select(|e| {
        e.speech_type == SpeechType::Typical && e.split == crate::corpus::Split::Train
    });
    if typical.is_empty() {
        return Err(UnitsError::ConfigError("no typical train utterances".into()));
    }
    let mut pooled: Vec<f64> = Vec::new();
    let mut dim = 0;
    let mut rows = 0;
    for entry in &typical {
        let utt = manifest.load_utterance(entry)?;
        let feats = base_features(&utt.waveform, dsp)?;
        dim = feats.cols;
        for t in 0..feats.rows {
            pooled.extend_from_slice(feats.row(t));
            rows += 1;
        }
    }
    let mut frames = Mat::from_vec(rows, dim, pooled);
    const MAX_FRAMES: usize = 40_000;
    if rows > MAX_FRAMES {
        let stride = rows.div_ceil(MAX_FRAMES);
        let kept: Vec<usize> = (0..rows).step_by(stride).collect();
        let mut sub = Mat::zeros(kept.len(), dim);
        for (i, &t) in kept.iter().enumerate() {
            sub.row_mut(i).copy_from_slice(frames.row(t));
        }
        frames = sub;
    }
    let shift_ms = dsp.frame_shift as f64 * 1000.0 / dsp.sample_rate as f64;
    fit_from_frames(&frames, k, seed, 1.0, shift_ms)
}

/// Soft assignment of each frame: softmax(-distance / temperature) over
/// centroids; rows sum to one.
pub fn extract_units(codebook: &UnitCodebook, waveform: &[f64], dsp: &DspParams) -> Result<UnitSequence, UnitsError> {
    let feats = base_features(waveform, dsp)?;
    if feats.cols != codebook.centroids.cols {
        return Err(UnitsError::ShapeError(format!(
            "feature dim {} vs codebook dim {}",
            feats.cols,
            codebook.centroids.cols
        )));
    }
    let k = codebook.n_units();
    let mut out = Mat::zeros(feats.rows, k);
    let mut row_buf = vec![0.0; feats.cols];
    for t in 0..feats.rows {
        row_buf.copy_from_slice(feats.row(t));
        standardize_row(&mut row_buf, &codebook.feature_mean, &codebook.feature_std);
        let scores = out.row_mut(t);
        for c in 0..k {
            scores[c] = -euclidean(&row_buf, codebook.centroids.row(c)) / codebook.temperature;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in scores.iter_mut() {
            *s /= sum;
        }
    }
    Ok(UnitSequence {
        frames: out,
        frame_shift_ms: codebook.frame_shift_ms,
    })
}

/// File-backed unit source: precomputed matrices (any real extractor can
/// produce them offline) served with the same interface as extraction.
pub struct ExternalUnitAdapter {
    map: HashMap<String, PathBuf>,
    expected_dim: usize,
    frame_shift_ms: f64,
}

impl ExternalUnitAdapter {
    /// `config` maps utterance id to a matrix dump path (relative paths
    /// resolve against the config file's directory).
    pub fn from_config(config_path: &Path, expected_dim: usize, frame_shift_ms: f64) -> Result<Self, UnitsError> {
        let text = std::fs::read_to_string(config_path).map_err(|e| IoError::Io {
            path: config_path.display().to_string(),
            source: e,
        })?;
        let raw: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| UnitsError::ConfigError(e.to_string()))?;
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        let map = raw
            .into_iter()
            .map(|(id, p)| {
                let pb = PathBuf::from(&p);
                let resolved = if pb.is_absolute() { pb } else { base.join(pb) };
                (id, resolved)
            })
            .collect();
        Ok(ExternalUnitAdapter {
            map,
            expected_dim,
            frame_shift_ms,
        })
    }

    pub fn get(&self, utterance_id: &str) -> Result<UnitSequence, UnitsError> {
        let path = self
            .map
            .get(utterance_id)
            .ok_or_else(|| UnitsError::MissingUtterance(utterance_id.to_string()))?;
        let frames = read_matrix(path)?;
        if frames.cols != self.expected_dim {
            return Err(UnitsError::ConfigError(format!(
                "unit dim {} for {utterance_id} does not match configured {}",
                frames.cols, self.expected_dim
            )));
        }
        Ok(UnitSequence {
            frames,
            frame_shift_ms: self.frame_shift_ms,
        })
    }

    /// Checks that every manifest utterance has a unit file; reports the
    /// first missing id otherwise.
    pub fn verify_coverage(&self, manifest: &Manifest) -> Result<(), UnitsError> {
        for entry in &manifest.entries {
            if !self.map.contains_key(&entry.utterance_id) {
                return Err(UnitsError::MissingUtterance(entry.utterance_id.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_typical, parse_transcript, SpeakerSpec};
    use crate::io::{write_matrix, Dtype};

    fn toy_frames(n: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = Prng::seed_from_u64(seed);
        Mat::from_vec(n, dim, (0..n * dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
    }

    #[test]
    fn codebook_dim_mismatch_is_shape_error() {
        let frames = toy_frames(50, 4, 1);
        let cb = fit_from_frames(&frames, 1, 0, 1.0, 10.0).unwrap();
        let units = extract_units(&cb, &sine_utterance().waveform, &DspParams::default());
        assert!(matches!(units, Err(UnitsError::ShapeError(_))));
    }

    fn sine_utterance() -> crate::corpus::Utterance {
        let text = parse_transcript("aeioum").unwrap();
        generate_typical("u", &text, &SpeakerSpec::new("s", 150.0, 1.0), 3).unwrap()
    }

    #[test]
    fn rows_are_normalized_probabilities() {
        let u = sine_utterance();
        let dsp = DspParams::default();
        let feats = base_features(&u.waveform, &dsp).unwrap();
        let cb = fit_from_frames(&feats, 8, 5, 1.0, 10.0).unwrap();
        let units = extract_units(&cb, &u.waveform, &dsp).unwrap();
        for t in 0..units.frames.rows {
            let row = units.frames.row(t);
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "frame {t} sums to {sum}");
        }
        // Single-centroid codebook: every assignment is exactly [1.0].
        let cb1 = fit_from_frames(&feats, 1, 5, 1.0, 10.0).unwrap();
        let units1 = extract_units(&cb1, &u.waveform, &dsp).unwrap();
        assert!(units1.frames.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn refit_with_same_seed_is_identical() {
        let frames = toy_frames(200, 6, 9);
        let a = fit_from_frames(&frames, 8, 42, 1.0, 10.0).unwrap();
        let b = fit_from_frames(&frames, 8, 42, 1.0, 10.0).unwrap();
        assert_eq!(a.centroids, b.centroids);
        let c = fit_from_frames(&frames, 8, 43, 1.0, 10.0).unwrap();
        assert_ne!(a.centroids, c.centroids);
    }

    #[test]
    fn inertia_decreases_with_more_centroids() {
        let frames = toy_frames(300, 5, 4);
        let small = fit_from_frames(&frames, 4, 7, 1.0, 10.0).unwrap();
        let large = fit_from_frames(&frames, 32, 7, 1.0, 10.0).unwrap();
        assert!(
            large.inertia <= small.inertia,
            "{} vs {}",
            large.inertia,
            small.inertia
        );
    }

    #[test]
    fn k_larger_than_frames_is_config_error() {
        let frames = toy_frames(5, 3, 0);
        assert!(matches!(
            fit_from_frames(&frames, 10, 0, 1.0, 10.0),
            Err(UnitsError::ConfigError(_))
        ));
    }

    #[test]
    fn tiny_temperature_approaches_one_hot() {
        let u = sine_utterance();
        let dsp = DspParams::default();
        let feats = base_features(&u.waveform, &dsp).unwrap();
        let mut cb = fit_from_frames(&feats, 6, 2, 1.0, 10.0).unwrap();
        cb.temperature = 1e-4;
        let units = extract_units(&cb, &u.waveform, &dsp).unwrap();
        for t in 0..units.frames.rows {
            let max = units.frames.row(t).iter().cloned().fold(0.0, f64::max);
            assert!(max > 0.999, "frame {t} max {max}");
        }
    }

    #[test]
    fn determinism_of_extraction() {
        let u = sine_utterance();
        let dsp = DspParams::default();
        let feats = base_features(&u.waveform, &dsp).unwrap();
        let cb = fit_from_frames(&feats, 8, 2, 1.0, 10.0).unwrap();
        let a = extract_units(&cb, &u.waveform, &dsp).unwrap();
        let b = extract_units(&cb, &u.waveform, &dsp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapter_round_trips_dumps_and_reports_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let u = sine_utterance();
        let dsp = DspParams::default();
        let feats = base_features(&u.waveform, &dsp).unwrap();
        let cb = fit_from_frames(&feats, 8, 2, 1.0, 10.0).unwrap();
        let units = extract_units(&cb, &u.waveform, &dsp).unwrap();
        let dump = dir.path().join("u.elvm");
        write_matrix(&dump, &units.frames, Dtype::F64).unwrap();
        let config = dir.path().join("units.json");
        std::fs::write(&config, serde_json::json!({"u": "u.elvm"}).to_string()).unwrap();
        let adapter = ExternalUnitAdapter::from_config(&config, 8, 10.0).unwrap();
        let served = adapter.get("u").unwrap();
        assert_eq!(served.frames, units.frames);
        assert!(matches!(
            adapter.get("nope"),
            Err(UnitsError::MissingUtterance(_))
        ));
        let wrong_dim = ExternalUnitAdapter::from_config(&config, 16, 10.0).unwrap();
        assert!(matches!(wrong_dim.get("u"), Err(UnitsError::ConfigError(_))));
    }

    #[test]
    fn units_reduce_speaker_information_vs_mel() {
        // Same sentences by two synthetic typical speakers: after
        // per-feature standardization, DTW distance in unit space is
        // smaller than in mel space.
        let dsp = DspParams::default();
        let spk_a = SpeakerSpec::new("a", 120.0, 1.08);
        let spk_b = SpeakerSpec::new("b", 210.0, 0.93);
        let texts = ["aeskomn", "uwilato", "penirak", "mosaelu"];
        let mut fit_frames: Vec<f64> = Vec::new();
        let mut dim = 0;
        let mut rows = 0;
        for (i, t) in texts.iter().enumerate() {
            for spk in [&spk_a, &spk_b] {
                let u = generate_typical("x", &parse_transcript(t).unwrap(), spk, i as u64).unwrap();
                let f = base_features(&u.waveform, &dsp).unwrap();
                dim = f.cols;
                rows += f.rows;
                fit_frames.extend_from_slice(&f.data);
            }
        }
        let pooled = Mat::from_vec(rows, dim, fit_frames);
        let cb = fit_from_frames(&pooled, 16, 11, 1.0, 10.0).unwrap();

        let standardized_dtw = |seqs: Vec<Mat>| -> f64 {
            // Standardize each feature dim over all frames, then DTW
            // between speaker pairs per sentence.
            let dim = seqs[0].cols;
            let total_rows: usize = seqs.iter().map(|m| m.rows).sum();
            let mut mean = vec![0.0; dim];
            for m in &seqs {
                for t in 0..m.rows {
                    for (i, &v) in m.row(t).iter().enumerate() {
                        mean[i] += v;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= total_rows as f64);
            let mut std = vec![0.0; dim];
            for m in &seqs {
                for t in 0..m.rows {
                    for (i, &v) in m.row(t).iter().enumerate() {
                        std[i] += (v - mean[i]) * (v - mean[i]);
                    }
                }
            }
            std.iter_mut().for_each(|v| *v = (*v / total_rows as f64).sqrt().max(1e-9));
            let normed: Vec<crate::dsp::McepSequence> = seqs
                .into_iter()
                .map(|m| {
                    // Prepend a dummy c0 column because dtw skips col 0.
                    let mut with_c0 = Mat::zeros(m.rows, dim + 1);
                    for t in 0..m.rows {
                        for i in 0..dim {
                            with_c0.data[t * (dim + 1) + 1 + i] = (m.at(t, i) - mean[i]) / std[i];
                        }
                    }
                    crate::dsp::McepSequence { frames: with_c0 }
                })
                .collect();
            let mut total = 0.0;
            for pair in normed.chunks(2) {
                let path = crate::eval::dtw_align(&pair[0], &pair[1]).unwrap();
                total += crate::eval::dtw_cost(&pair[0], &pair[1], &path) / path.len() as f64;
            }
            total
        };

        let mut unit_seqs = Vec::new();
        let mut mel_seqs = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            for spk in [&spk_a, &spk_b] {
                let u = generate_typical("x", &parse_transcript(t).unwrap(), spk, i as u64).unwrap();
                unit_seqs.push(extract_units(&cb, &u.waveform, &dsp).unwrap().frames);
                mel_seqs.push(crate::dsp::mel_spectrogram(&u.waveform, &dsp).unwrap().frames);
            }
        }
        let unit_d = standardized_dtw(unit_seqs);
        let mel_d = standardized_dtw(mel_seqs);
        assert!(
            unit_d < mel_d,
            "unit DTW {unit_d} should be below mel DTW {mel_d}"
        );
    }

    #[test]
    fn mean_unit_activations_predict_majority_phoneme() {
        // Desk-scale content check: logistic regression on mean unit
        // activations beats chance at predicting the dominant phoneme.
        let dsp = DspParams::default();
        let spk = SpeakerSpec::new("s", 160.0, 1.0);
        let classes = ["a", "e", "i", "o", "u"];
        let mut rng = Prng::seed_from_u64(77);
        let mut data: Vec<(Mat, usize)> = Vec::new();
        let mut fit_pool: Vec<f64> = Vec::new();
        let mut dim = 0;
        let mut rows = 0;
        for rep in 0..12 {
            for (label, c) in classes.iter().enumerate() {
                // Majority phoneme ~60% of a 10-symbol utterance.
                let mut text = String::new();
                for i in 0..10 {
                    if i % 5 < 3 {
                        text.push_str(c);
                    } else {
                        let alt = classes[rng.below(classes.len())];
                        text.push_str(alt);
                    }
                }
                let u = generate_typical("x", &parse_transcript(&text).unwrap(), &spk, rep * 31 + label as u64).unwrap();
                let f = base_features(&u.waveform, &dsp).unwrap();
                dim = f.cols;
                rows += f.rows;
                fit_pool.extend_from_slice(&f.data);
                data.push((f, label));
            }
        }
        let cb = fit_from_frames(&Mat::from_vec(rows, dim, fit_pool), 16, 3, 1.0, 10.0).unwrap();
        // Mean activation per utterance.
        let mut examples: Vec<(Vec<f64>, usize)> = Vec::new();
        for (feats, label) in &data {
            let mut m = Mat::zeros(feats.rows, cb.n_units());
            let mut row = vec![0.0; feats.cols];
            for t in 0..feats.rows {
                row.copy_from_slice(feats.row(t));
                standardize_row(&mut row, &cb.feature_mean, &cb.feature_std);
                let scores = m.row_mut(t);
                for c in 0..cb.n_units() {
                    scores[c] = -euclidean(&row, cb.centroids.row(c));
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                scores.iter_mut().for_each(|s| *s /= sum);
            }
            let mut mean = vec![0.0; cb.n_units()];
            for t in 0..m.rows {
                for (i, &v) in m.row(t).iter().enumerate() {
                    mean[i] += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m.rows as f64);
            examples.push((mean, *label));
        }
        // Split train/test by repetition block.
        let (train, test) = examples.split_at(classes.len() * 8);
        // Multinomial logistic regression by gradient descent.
        let k = cb.n_units();
        let ncls = classes.len();
        let mut w = vec![0.0; ncls * k];
        for _ in 0..400 {
            let mut grad = vec![0.0; ncls * k];
            for (x, y) in train {
                let mut logits: Vec<f64> = (0..ncls)
                    .map(|c| (0..k).map(|i| w[c * k + i] * x[i]).sum())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                logits.iter_mut().for_each(|l| {
                    *l = (*l - max).exp();
                    sum += *l;
                });
                for c in 0..ncls {
                    let p = logits[c] / sum - if c == *y { 1.0 } else { 0.0 };
                    for i in 0..k {
                        grad[c * k + i] += p * x[i];
                    }
                }
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= 0.5 * gi / train.len() as f64;
            }
        }
        let mut correct = 0;
        for (x, y) in test {
            let best = (0..ncls)
                .max_by(|&a, &b| {
                    let sa: f64 = (0..k).map(|i| w[a * k + i] * x[i]).sum();
                    let sb: f64 = (0..k).map(|i| w[b * k + i] * x[i]).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap();
            if best == *y {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / test.len() as f64;
        assert!(
            accuracy > 0.4,
            "held-out accuracy {accuracy} should beat chance 0.2 clearly"
        );
    }
}
