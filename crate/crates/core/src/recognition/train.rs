//! Stage training for the recognizer.

use super::model::RecognizerModel;
use super::{LossBreakdown, RecognitionError};
use crate::corpus::{Manifest, ManifestEntry, PhoneId, SpeechType};
use crate::dsp::{mel_spectrogram, DspParams};
use crate::mat::Mat;
use crate::nn::{clip_global_norm, Adam};
use crate::rng::Prng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// One training example: precomputed log-mel features plus labels.
#[derive(Debug, Clone)]
pub struct RecItem {
    pub id: String,
    pub mel: Mat,
    pub transcript: Vec<PhoneId>,
    pub speech_type: SpeechType,
}

/// Loads features for manifest entries (parallel over utterances).
pub fn dataset_from_entries(
    manifest: &Manifest,
    entries: &[&ManifestEntry],
    dsp: &DspParams,
) -> Result<Vec<RecItem>, RecognitionError> {
    entries
        .par_iter()
        .map(|entry| {
            let utt = manifest.load_utterance(entry)?;
            let mel = mel_spectrogram(&utt.waveform, dsp)?;
            Ok(RecItem {
                id: utt.id,
                mel: mel.frames,
                transcript: utt.transcript,
                speech_type: utt.speech_type,
            })
        })
        .collect()
}

/// Optimizer choice per stage. Adam adapts step sizes and is right for
/// from-scratch pretraining; plain SGD with momentum keeps fine-tuning
/// drift proportional to the actual gradient, which preserves earlier
/// capabilities far better once the new loss flattens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StageOptimizer {
    Adam,
    Sgd { momentum: f64 },
}

/// Which loss shape a stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// CTC + attention over every utterance (stages 1 and 3).
    Standard,
    /// SID over all, CTC/attention over the EL subset only (stage 2).
    Intermediate,
    /// SID over all, CTC/attention unmasked (stage-2 ablation).
    IntermediateNoMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionRecipe {
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// L2 pull toward the stage-entry parameters. Keeps capabilities of
    /// earlier stages (typical decoding) intact while a stage trains on a
    /// different subset; 0 disables.
    pub anchor_weight: f64,
    pub optimizer: StageOptimizer,
    /// When set, a checkpoint is written after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl RecognitionRecipe {
    pub fn new(loss_mode: LossMode, epochs: usize, lr: f64, seed: u64) -> Self {
        RecognitionRecipe {
            loss_mode,
            epochs,
            lr,
            lr_decay: 0.98,
            batch_size: 8,
            seed,
            anchor_weight: 0.0,
            optimizer: StageOptimizer::Adam,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
}

/// Runs one training stage in place. `epochs = 0` leaves the parameters
/// bit-identical. Dev loss is logged per epoch; checkpoints are written
/// when the recipe names a directory.
pub fn train_stage(
    model: &mut RecognizerModel,
    recipe: &RecognitionRecipe,
    train: &[RecItem],
    dev: &[RecItem],
) -> Result<TrainLog, RecognitionError> {
    if train.is_empty() {
        return Err(RecognitionError::ConfigError("empty training set".into()));
    }
    let mut log = TrainLog::default();
    let mut adam = Adam::new(&model.store, recipe.lr);
    let mut sgd_velocity = model.store.zero_gradients();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Prng::derive(recipe.seed, "recognition-train", 0);
    let anchor = if recipe.anchor_weight > 0.0 {
        Some(model.store.clone())
    } else {
        None
    };
    for epoch in 0..recipe.epochs {
        adam.lr = recipe.lr * recipe.lr_decay.powi(epoch as i32);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(recipe.batch_size) {
            let batch: Vec<RecItem> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut grads = model.store.zero_gradients();
            let breakdown = model.batch_loss(&batch, recipe.loss_mode, Some(&mut grads))?;
            if let Some(origin) = &anchor {
                for pid in 0..model.store.len() {
                    let current = &model.store.value(pid).data;
                    let init = &origin.value(pid).data;
                    let g = &mut grads[pid].data;
                    for i in 0..g.len() {
                        g[i] += recipe.anchor_weight * (current[i] - init[i]);
                    }
                }
            }
            clip_global_norm(&mut grads, 5.0);
            match recipe.optimizer {
                StageOptimizer::Adam => adam.step(&mut model.store, &grads, &[]),
                StageOptimizer::Sgd { momentum } => {
                    let lr = adam.lr;
                    for pid in 0..model.store.len() {
                        let v = &mut sgd_velocity[pid].data;
                        let g = &grads[pid].data;
                        let value = &mut model.store.value_mut(pid).data;
                        for i in 0..v.len() {
                            v[i] = momentum * v[i] + g[i];
                            value[i] -= lr * v[i];
                        }
                    }
                }
            }
            epoch_loss += breakdown.total;
            batches += 1;
        }
        log.train_loss.push(epoch_loss / batches.max(1) as f64);
        let dev_loss = if dev.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(model, dev, recipe.loss_mode, recipe.batch_size)?.total
        };
        log.dev_loss.push(dev_loss);
        if let Some(dir) = &recipe.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            model.save(
                &path,
                serde_json::json!({"epoch": epoch, "dev_loss": dev_loss, "recipe": recipe}),
            )?;
        }
    }
    Ok(log)
}

/// Mean loss over a dataset without updating parameters.
pub fn evaluate_loss(
    model: &RecognizerModel,
    data: &[RecItem],
    mode: LossMode,
    batch_size: usize,
) -> Result<LossBreakdown, RecognitionError> {
    let mut total = LossBreakdown::default();
    let mut n = 0usize;
    for chunk in data.chunks(batch_size) {
        let b = model.batch_loss(chunk, mode, None)?;
        total.total += b.total;
        total.sid += b.sid;
        total.ctc += b.ctc;
        total.attn += b.attn;
        n += 1;
    }
    let n = n.max(1) as f64;
    total.total /= n;
    total.sid /= n;
    total.ctc /= n;
    total.attn /= n;
    Ok(total)
}

/// Speech-type classification accuracy (logit > 0 means EL).
pub fn sid_accuracy(model: &RecognizerModel, data: &[RecItem]) -> Result<f64, RecognitionError> {
    if data.is_empty() {
        return Err(RecognitionError::EmptyBatch);
    }
    let correct: Result<Vec<bool>, RecognitionError> = data
        .par_iter()
        .map(|item| {
            let logit = model.sid_logit_for(&item.mel)?;
            Ok((logit > 0.0) == (item.speech_type == SpeechType::El))
        })
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Corpus-level CER of greedy CTC decoding over a dataset.
pub fn dataset_cer(model: &RecognizerModel, data: &[RecItem]) -> Result<f64, RecognitionError> {
    let pairs: Result<Vec<(usize, usize)>, RecognitionError> = data
        .par_iter()
        .map(|item| {
            let hyp = model.decode(&item.mel, super::DecodeMode::Greedy)?;
            Ok((crate::eval::edit_distance(&item.transcript, &hyp), item.transcript.len()))
        })
        .collect();
    let pairs = pairs?;
    let edits: usize = pairs.iter().map(|p| p.0).sum();
    let len: usize = pairs.iter().map(|p| p.1).sum();
    Ok(edits as f64 / len.max(1) as f64)
}
