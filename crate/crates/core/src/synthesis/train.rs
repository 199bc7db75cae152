//! Multi-speaker pretraining and few-shot adaptation of the decoder.

use super::model::DiffusionDecoder;
use super::{SpeakerEmbedding, SynthesisError};
use crate::mat::Mat;
use crate::nn::{clip_global_norm, Adam, Gradients};
use crate::rng::Prng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// One training utterance: mel target, frame-aligned unit conditioning,
/// and the (fixed) speaker embedding it belongs to.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub id: String,
    pub speaker_id: String,
    pub mel: Mat,
    pub units: Mat,
    pub spk: SpeakerEmbedding,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Pretraining requires at least this many distinct speakers.
    pub min_pretrain_speakers: usize,
    /// Adaptation refuses datasets larger than this (few-shot scale).
    pub max_fewshot_utts: usize,
}

impl SynthRecipe {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        SynthRecipe {
            epochs,
            lr,
            lr_decay: 0.98,
            batch_size: 8,
            seed,
            checkpoint_dir: None,
            min_pretrain_speakers: 8,
            max_fewshot_utts: 116,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthTrainLog {
    pub phase: String,
    pub train_loss: Vec<f64>,
}

fn run_phase(
    decoder: &mut DiffusionDecoder,
    recipe: &SynthRecipe,
    items: &[SynthItem],
    phase: &str,
) -> Result<SynthTrainLog, SynthesisError> {
    let mut log = SynthTrainLog {
        phase: phase.to_string(),
        ..Default::default()
    };
    let mut adam = Adam::new(&decoder.store, recipe.lr);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = Prng::derive(recipe.seed, phase, 0);
    for epoch in 0..recipe.epochs {
        adam.lr = recipe.lr * recipe.lr_decay.powi(epoch as i32);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (chunk_idx, chunk) in order.chunks(recipe.batch_size).enumerate() {
            let results: Result<Vec<(f64, Gradients)>, SynthesisError> = chunk
                .par_iter()
                .map(|&i| {
                    let item = &items[i];
                    let mut step_rng = Prng::derive(
                        recipe.seed,
                        &format!("{phase}-step-{epoch}-{chunk_idx}"),
                        i as u64,
                    );
                    let mut local = decoder.store.zero_gradients();
                    let (loss, _) =
                        decoder.train_step(&item.mel, &item.units, &item.spk, &mut step_rng, Some(&mut local))?;
                    Ok((loss, local))
                })
                .collect();
            let results = results?;
            let mut grads = decoder.store.zero_gradients();
            let mut batch_loss = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for (loss, local) in &results {
                batch_loss += loss * scale;
                for (acc, l) in grads.iter_mut().zip(local) {
                    for (a, v) in acc.data.iter_mut().zip(&l.data) {
                        *a += v * scale;
                    }
                }
            }
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut decoder.store, &grads, &[]);
            epoch_loss += batch_loss;
            batches += 1;
        }
        log.train_loss.push(epoch_loss / batches.max(1) as f64);
        if let Some(dir) = &recipe.checkpoint_dir {
            let mut snapshot = DiffusionDecoder::with_store(
                decoder.config.clone(),
                decoder.store.clone(),
                decoder.lineage.clone(),
            );
            snapshot.lineage.push(format!("{phase}@epoch{epoch}"));
            snapshot.save(&dir.join(format!("{phase}_epoch_{epoch:03}.ckpt")))?;
        }
    }
    decoder.lineage.push(phase.to_string());
    Ok(log)
}

/// Pretrains on a multi-speaker corpus (fails below the configured
/// speaker-count floor).
pub fn pretrain_multispeaker(
    decoder: &mut DiffusionDecoder,
    items: &[SynthItem],
    recipe: &SynthRecipe,
) -> Result<SynthTrainLog, SynthesisError> {
    if recipe.epochs > 0 {
        let mut speakers: Vec<&str> = items.iter().map(|i| i.speaker_id.as_str()).collect();
        speakers.sort_unstable();
        speakers.dedup();
        if speakers.len() < recipe.min_pretrain_speakers {
            return Err(SynthesisError::ConfigError(format!(
                "multi-speaker pretraining needs >= {} speakers, got {}",
                recipe.min_pretrain_speakers,
                speakers.len()
            )));
        }
    }
    run_phase(decoder, recipe, items, "pretrain_multispeaker")
}

/// Full fine-tune on few-shot target data (every parameter updates).
pub fn adapt_fewshot(
    decoder: &mut DiffusionDecoder,
    items: &[SynthItem],
    recipe: &SynthRecipe,
) -> Result<SynthTrainLog, SynthesisError> {
    if items.is_empty() && recipe.epochs > 0 {
        return Err(SynthesisError::ConfigError("no adaptation utterances".into()));
    }
    if items.len() > recipe.max_fewshot_utts {
        return Err(SynthesisError::ConfigError(format!(
            "adaptation set {} exceeds the few-shot cap {}",
            items.len(),
            recipe.max_fewshot_utts
        )));
    }
    run_phase(decoder, recipe, items, "adapt_fewshot")
}

#[cfg(test)]
mod tests {
    use super::super::tests::{spk2, tiny_config};
    use super::*;

    fn items(n: usize, speakers: usize, seed: u64) -> Vec<SynthItem> {
        let mut rng = Prng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = 3 + i % 3;
                let mut units = Mat::zeros(t, 3);
                for r in 0..t {
                    let mut sum = 0.0;
                    for c in 0..3 {
                        let v = rng.uniform() + 1e-3;
                        units.data[r * 3 + c] = v;
                        sum += v;
                    }
                    units.row_mut(r).iter_mut().for_each(|v| *v /= sum);
                }
                SynthItem {
                    id: format!("u{i}"),
                    speaker_id: format!("spk{:02}", i % speakers),
                    mel: Mat::from_vec(t, 4, (0..t * 4).map(|_| rng.normal()).collect()),
                    units,
                    spk: spk2(),
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut decoder = DiffusionDecoder::new(tiny_config(), 4);
        let before: Vec<Mat> = (0..decoder.store.len()).map(|i| decoder.store.value(i).clone()).collect();
        let recipe = SynthRecipe::new(0, 1e-3, 0);
        pretrain_multispeaker(&mut decoder, &items(10, 8, 1), &recipe).unwrap();
        adapt_fewshot(&mut decoder, &items(4, 1, 2), &recipe).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(decoder.store.value(i), b);
        }
    }

    #[test]
    fn pretraining_requires_enough_speakers() {
        let mut decoder = DiffusionDecoder::new(tiny_config(), 5);
        let recipe = SynthRecipe::new(1, 1e-3, 0);
        assert!(matches!(
            pretrain_multispeaker(&mut decoder, &items(10, 3, 3), &recipe),
            Err(SynthesisError::ConfigError(_))
        ));
        pretrain_multispeaker(&mut decoder, &items(16, 8, 3), &recipe).unwrap();
    }

    #[test]
    fn adaptation_enforces_fewshot_cap() {
        let mut decoder = DiffusionDecoder::new(tiny_config(), 6);
        let recipe = SynthRecipe {
            max_fewshot_utts: 5,
            ..SynthRecipe::new(1, 1e-3, 0)
        };
        assert!(matches!(
            adapt_fewshot(&mut decoder, &items(6, 1, 4), &recipe),
            Err(SynthesisError::ConfigError(_))
        ));
        adapt_fewshot(&mut decoder, &items(5, 1, 4), &recipe).unwrap();
        assert_eq!(decoder.lineage, vec!["adapt_fewshot"]);
    }

    #[test]
    fn training_reduces_denoising_loss() {
        let mut decoder = DiffusionDecoder::new(tiny_config(), 7);
        let data = items(16, 8, 5);
        let recipe = SynthRecipe {
            batch_size: 8,
            ..SynthRecipe::new(30, 5e-3, 1)
        };
        let log = pretrain_multispeaker(&mut decoder, &data, &recipe).unwrap();
        let first = log.train_loss[0];
        let last = *log.train_loss.last().unwrap();
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn adaptation_moves_samples_toward_target_distribution() {
        // Target speaker mels sit at a constant offset; after adaptation
        // the sampled mels are closer to target-speaker dev mels in L2.
        let mut rng = Prng::seed_from_u64(31);
        let mut decoder = DiffusionDecoder::new(tiny_config(), 8);
        let offset = 1.5;
        let make = |rng: &mut Prng, n: usize| -> Vec<SynthItem> {
            (0..n)
                .map(|i| {
                    let t = 4;
                    let mut units = Mat::zeros(t, 3);
                    for r in 0..t {
                        units.data[r * 3 + (r + i) % 3] = 1.0;
                    }
                    SynthItem {
                        id: format!("t{i}"),
                        speaker_id: "target".into(),
                        mel: Mat::from_vec(t, 4, (0..t * 4).map(|_| offset + 0.05 * rng.normal()).collect()),
                        units,
                        spk: spk2(),
                    }
                })
                .collect()
        };
        let train = make(&mut rng, 12);
        let dev = make(&mut rng, 4);
        let distance = |decoder: &DiffusionDecoder| -> f64 {
            let mut total = 0.0;
            for (i, item) in dev.iter().enumerate() {
                let sampled = decoder.sample(&item.units, &item.spk, 0.0, 1000 + i as u64).unwrap();
                total += sampled
                    .data
                    .iter()
                    .zip(&item.mel.data)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            total
        };
        let before = distance(&decoder);
        let recipe = SynthRecipe {
            batch_size: 6,
            max_fewshot_utts: 116,
            ..SynthRecipe::new(60, 5e-3, 2)
        };
        adapt_fewshot(&mut decoder, &train, &recipe).unwrap();
        let after = distance(&decoder);
        assert!(after < before, "distance {before} -> {after}");
    }
}
