//! Pretraining and the two-step fine-tuning schedule.

use super::model::{AlignStage, AlignmentModel, SourceSeq};
use super::AlignmentError;
use crate::mat::Mat;
use crate::nn::{clip_global_norm, Adam};
use crate::rng::Prng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// One parallel training pair.
#[derive(Debug, Clone)]
pub struct AlignPair {
    pub id: String,
    pub src: SourceSeq,
    pub tgt: Mat,
}

/// Stop-flag labels: exactly one 1, at the final frame.
pub fn stop_labels(t_len: usize) -> Vec<f64> {
    let mut labels = vec![0.0; t_len];
    if t_len > 0 {
        labels[t_len - 1] = 1.0;
    }
    labels
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignRecipe {
    pub stage: AlignStage,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Parameter-name prefixes excluded from updates (bit-frozen).
    pub frozen_scopes: Vec<String>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl AlignRecipe {
    pub fn new(stage: AlignStage, epochs: usize, lr: f64, seed: u64) -> Self {
        let frozen_scopes = if stage == AlignStage::PretrainAe {
            vec!["decoder.".to_string()]
        } else {
            Vec::new()
        };
        AlignRecipe {
            stage,
            epochs,
            lr,
            lr_decay: 0.98,
            batch_size: 8,
            seed,
            frozen_scopes,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlignTrainLog {
    pub stage: String,
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
}

fn run_stage(
    model: &mut AlignmentModel,
    recipe: &AlignRecipe,
    train: &[AlignPair],
    dev: &[AlignPair],
) -> Result<AlignTrainLog, AlignmentError> {
    if train.is_empty() && recipe.epochs > 0 {
        return Err(AlignmentError::ConfigError(format!(
            "stage {} has no training pairs",
            recipe.stage.name()
        )));
    }
    let mut log = AlignTrainLog {
        stage: recipe.stage.name().to_string(),
        ..Default::default()
    };
    let mut adam = Adam::new(&model.store, recipe.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Prng::derive(recipe.seed, recipe.stage.name(), 0);
    for epoch in 0..recipe.epochs {
        adam.lr = recipe.lr * recipe.lr_decay.powi(epoch as i32);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(recipe.batch_size) {
            let batch: Vec<AlignPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut grads = model.store.zero_gradients();
            let loss = model.batch_loss(&batch, Some(&mut grads))?;
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut model.store, &grads, &recipe.frozen_scopes);
            epoch_loss += loss;
            batches += 1;
        }
        log.train_loss.push(epoch_loss / batches.max(1) as f64);
        let dev_loss = if dev.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(model, dev, recipe.batch_size)?
        };
        log.dev_loss.push(dev_loss);
        if let Some(dir) = &recipe.checkpoint_dir {
            let mut snapshot_lineage = model.lineage.clone();
            snapshot_lineage.push(format!("{}@epoch{epoch}", recipe.stage.name()));
            let snapshot = AlignmentModel::with_store(model.config.clone(), model.store.clone(), snapshot_lineage);
            snapshot.save(&dir.join(format!("{}_epoch_{epoch:03}.ckpt", recipe.stage.name())))?;
        }
    }
    model.lineage.push(recipe.stage.name().to_string());
    Ok(log)
}

/// Mean batch loss without updates.
pub fn evaluate_loss(model: &AlignmentModel, data: &[AlignPair], batch_size: usize) -> Result<f64, AlignmentError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in data.chunks(batch_size) {
        total += model.batch_loss(chunk, None)?;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

/// Runs one pretraining stage.
///
/// Parallel-VC trains on source-speaker -> target-speaker pairs. TTS
/// trains the symbol encoder plus the shared decoder from transcripts.
/// AE swaps the frame encoder in, keeps the TTS decoder bit-frozen, and
/// reconstructs target features from target features; it requires a TTS
/// stage in the lineage first.
pub fn pretrain(
    model: &mut AlignmentModel,
    recipe: &AlignRecipe,
    train: &[AlignPair],
    dev: &[AlignPair],
) -> Result<AlignTrainLog, AlignmentError> {
    if !recipe.stage.is_pretrain() {
        return Err(AlignmentError::ConfigError(format!(
            "{} is not a pretraining stage",
            recipe.stage.name()
        )));
    }
    if recipe.stage == AlignStage::PretrainAe
        && !model.lineage.iter().any(|s| s == AlignStage::PretrainTts.name())
    {
        return Err(AlignmentError::ConfigError(
            "autoencoder pretraining requires a TTS checkpoint first".into(),
        ));
    }
    if recipe.stage == AlignStage::PretrainAe
        && !recipe.frozen_scopes.iter().any(|s| s.starts_with("decoder"))
    {
        return Err(AlignmentError::ConfigError(
            "autoencoder pretraining must freeze the decoder scope".into(),
        ));
    }
    run_stage(model, recipe, train, dev)
}

/// Runs the two fine-tuning stages in order (synthetic EL, then target
/// EL), checkpointing each so system variants can branch.
pub fn finetune_schedule(
    model: &mut AlignmentModel,
    stages: &[(AlignRecipe, Vec<AlignPair>, Vec<AlignPair>)],
) -> Result<Vec<AlignTrainLog>, AlignmentError> {
    let expected = [AlignStage::FtSyntheticEl, AlignStage::FtTargetEl];
    if stages.len() != expected.len()
        || stages.iter().zip(&expected).any(|((r, _, _), e)| r.stage != *e)
    {
        return Err(AlignmentError::ConfigError(
            "fine-tuning must run ft_synthetic_el then ft_target_el".into(),
        ));
    }
    if !model.lineage.iter().any(|s| s.starts_with("pretrain")) {
        return Err(AlignmentError::ConfigError(
            "fine-tuning requires a pretraining stage first".into(),
        ));
    }
    let mut logs = Vec::new();
    for (recipe, train, dev) in stages {
        logs.push(run_stage(model, recipe, train, dev)?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_frames, random_simplex, tiny_config};
    use super::super::FeatureKind;
    use super::*;

    fn pairs(n: usize, seed: u64) -> Vec<AlignPair> {
        let mut rng = Prng::seed_from_u64(seed);
        (0..n)
            .map(|i| AlignPair {
                id: format!("p{i}"),
                src: SourceSeq::Frames(random_frames(&mut rng, 5 + i % 3, 5)),
                tgt: random_simplex(&mut rng, 7 + i % 4, 4),
            })
            .collect()
    }

    #[test]
    fn zero_epoch_stages_are_identity() {
        let mut model = AlignmentModel::new(tiny_config(5, 4), 1);
        let before: Vec<Mat> = (0..model.store.len()).map(|i| model.store.value(i).clone()).collect();
        let recipe = AlignRecipe::new(AlignStage::PretrainParallelVc, 0, 1e-3, 0);
        pretrain(&mut model, &recipe, &pairs(3, 2), &[]).unwrap();
        let ft = vec![
            (AlignRecipe::new(AlignStage::FtSyntheticEl, 0, 1e-3, 0), pairs(2, 3), vec![]),
            (AlignRecipe::new(AlignStage::FtTargetEl, 0, 1e-3, 0), pairs(2, 4), vec![]),
        ];
        finetune_schedule(&mut model, &ft).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(model.store.value(i), b, "parameter {i} moved");
        }
        assert_eq!(
            model.lineage,
            vec!["pretrain_parallel_vc", "ft_synthetic_el", "ft_target_el"]
        );
    }

    #[test]
    fn ae_pretraining_freezes_decoder_bits() {
        let mut model = AlignmentModel::new(tiny_config(5, 4), 5);
        // TTS first (required for AE), trains the decoder.
        let tts = AlignRecipe::new(AlignStage::PretrainTts, 2, 2e-3, 0);
        let mut rng = Prng::seed_from_u64(6);
        let tts_pairs: Vec<AlignPair> = (0..3)
            .map(|i| AlignPair {
                id: format!("t{i}"),
                src: SourceSeq::Symbols(vec![(i % 6) as u8, ((i + 1) % 6) as u8]),
                tgt: random_simplex(&mut rng, 6, 4),
            })
            .collect();
        pretrain(&mut model, &tts, &tts_pairs, &[]).unwrap();
        let decoder_before: Vec<(String, Mat)> = (0..model.store.len())
            .filter(|&i| model.store.name(i).starts_with("decoder."))
            .map(|i| (model.store.name(i).to_string(), model.store.value(i).clone()))
            .collect();
        assert!(!decoder_before.is_empty());
        let ae = AlignRecipe::new(AlignStage::PretrainAe, 2, 2e-3, 1);
        assert!(ae.frozen_scopes.contains(&"decoder.".to_string()));
        pretrain(&mut model, &ae, &pairs(3, 7), &[]).unwrap();
        for (name, before) in &decoder_before {
            let id = model.store.id_of(name).unwrap();
            assert_eq!(model.store.value(id), before, "{name} changed during AE");
        }
    }

    #[test]
    fn ae_without_tts_is_config_error() {
        let mut model = AlignmentModel::new(tiny_config(5, 4), 8);
        let ae = AlignRecipe::new(AlignStage::PretrainAe, 1, 1e-3, 0);
        assert!(matches!(
            pretrain(&mut model, &ae, &pairs(2, 9), &[]),
            Err(AlignmentError::ConfigError(_))
        ));
    }

    #[test]
    fn finetune_order_is_enforced() {
        let mut model = AlignmentModel::new(tiny_config(5, 4), 10);
        let recipe = AlignRecipe::new(AlignStage::PretrainParallelVc, 1, 1e-3, 0);
        pretrain(&mut model, &recipe, &pairs(3, 11), &[]).unwrap();
        let wrong = vec![
            (AlignRecipe::new(AlignStage::FtTargetEl, 1, 1e-3, 0), pairs(2, 12), vec![]),
            (AlignRecipe::new(AlignStage::FtSyntheticEl, 1, 1e-3, 0), pairs(2, 13), vec![]),
        ];
        assert!(matches!(
            finetune_schedule(&mut model, &wrong),
            Err(AlignmentError::ConfigError(_))
        ));
        // And fine-tuning before any pretraining fails.
        let mut fresh = AlignmentModel::new(tiny_config(5, 4), 14);
        let ok_order = vec![
            (AlignRecipe::new(AlignStage::FtSyntheticEl, 1, 1e-3, 0), pairs(2, 15), vec![]),
            (AlignRecipe::new(AlignStage::FtTargetEl, 1, 1e-3, 0), pairs(2, 16), vec![]),
        ];
        assert!(matches!(
            finetune_schedule(&mut fresh, &ok_order),
            Err(AlignmentError::ConfigError(_))
        ));
    }

    #[test]
    fn pretraining_halves_dev_loss_on_learnable_pairs() {
        // Source frames deterministically map to target frames, so a
        // trained model must beat its untrained dev loss by half.
        let mut rng = Prng::seed_from_u64(20);
        let mut make = |n: usize| -> Vec<AlignPair> {
            (0..n)
                .map(|i| {
                    let t = 5 + i % 3;
                    let src = random_frames(&mut rng, t, 5);
                    // Target: per-frame softmax of a fixed linear map.
                    let mut tgt = Mat::zeros(t, 4);
                    for r in 0..t {
                        let s = src.row(r);
                        let mut row = [
                            s[0] + s[1],
                            s[2] - s[3],
                            s[4] * 0.5,
                            s[0] - s[4],
                        ];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for (c, v) in row.iter().enumerate() {
                            tgt.data[r * 4 + c] = v / sum;
                        }
                    }
                    AlignPair {
                        id: format!("p{i}"),
                        src: SourceSeq::Frames(src),
                        tgt,
                    }
                })
                .collect()
        };
        let train = make(24);
        let dev = make(8);
        let mut model = AlignmentModel::new(tiny_config(5, 4), 21);
        let untrained = evaluate_loss(&model, &dev, 8).unwrap();
        let recipe = AlignRecipe {
            batch_size: 8,
            ..AlignRecipe::new(AlignStage::PretrainParallelVc, 40, 4e-3, 2)
        };
        pretrain(&mut model, &recipe, &train, &dev).unwrap();
        let trained = evaluate_loss(&model, &dev, 8).unwrap();
        assert!(
            trained < 0.5 * untrained,
            "dev loss {untrained} -> {trained}"
        );
    }

    #[test]
    fn mel_output_head_is_linear() {
        // Mel-kind outputs are unconstrained; unit-kind rows sum to one.
        let mut config = tiny_config(5, 4);
        config.output_kind = FeatureKind::Mel;
        let model = AlignmentModel::new(config, 30);
        let mut rng = Prng::seed_from_u64(31);
        let src = SourceSeq::Frames(random_frames(&mut rng, 5, 5));
        let out = model.convert(&src, 20).unwrap();
        let sums: Vec<f64> = (0..out.frames.rows).map(|r| out.frames.row(r).iter().sum()).collect();
        assert!(sums.iter().any(|s| (s - 1.0).abs() > 1e-6));
    }
}
