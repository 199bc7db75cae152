//! Sequence-to-sequence alignment model: maps EL-domain feature sequences
//! to typical-domain targets, learning rate correction (EL speech is
//! slower) and phoneme correction (EL speech realizes some phonemes
//! wrongly).
//!
//! The same trainer covers every system configuration: inputs can be BNFs
//! or mel-spectrograms, outputs soft units (simplex head) or mels (linear
//! head). Pretraining is either parallel VC (source -> target speaker
//! pairs) or TTS followed by decoder-frozen autoencoding; fine-tuning runs
//! on synthetic EL pairs and then the target EL pairs, in that order.

mod model;
mod train;

pub use model::{
    AlignStage, AlignmentConfig, AlignmentModel, ConvertOutput, FeatureKind, SourceSeq,
};
pub use train::{finetune_schedule, pretrain, AlignPair, AlignRecipe, AlignTrainLog};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("config error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Ckpt(#[from] crate::ckpt::CkptError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::rng::Prng;

    pub(crate) fn tiny_config(input_dim: usize, output_dim: usize) -> AlignmentConfig {
        AlignmentConfig {
            input_kind: FeatureKind::Bnf,
            output_kind: FeatureKind::Units,
            input_dim,
            output_dim,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            encoder_blocks: 2,
            decoder_blocks: 2,
            vocab: 6,
            stop_threshold: 0.5,
            max_frames_factor: 3.0,
            input_subsample_factor: 4,
        }
    }

    pub(crate) fn random_frames(rng: &mut Prng, t: usize, d: usize) -> Mat {
        Mat::from_vec(t, d, (0..t * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
    }

    /// Random rows on the simplex (reachable by the softmax output head).
    pub(crate) fn random_simplex(rng: &mut Prng, t: usize, d: usize) -> Mat {
        let mut m = random_frames(rng, t, d);
        for r in 0..t {
            let row = m.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        m
    }

    #[test]
    fn stop_labels_have_single_one_at_the_end() {
        let labels = train::stop_labels(5);
        assert_eq!(labels, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(labels.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn batch_loss_is_permutation_equivariant() {
        let mut rng = Prng::seed_from_u64(3);
        let model = AlignmentModel::new(tiny_config(5, 4), 7);
        let pairs: Vec<AlignPair> = (0..4)
            .map(|i| AlignPair {
                id: format!("p{i}"),
                src: SourceSeq::Frames(random_frames(&mut rng, 6 + i, 5)),
                tgt: random_simplex(&mut rng, 8 + i, 4),
            })
            .collect();
        let forward = model.batch_loss(&pairs, None).unwrap();
        let reversed: Vec<AlignPair> = pairs.iter().rev().cloned().collect();
        let backward = model.batch_loss(&reversed, None).unwrap();
        assert!((forward - backward).abs() < 1e-6);
    }

    #[test]
    fn non_parallel_batch_is_shape_error() {
        let mut rng = Prng::seed_from_u64(4);
        let model = AlignmentModel::new(tiny_config(5, 4), 7);
        let bad = AlignPair {
            id: "bad".into(),
            src: SourceSeq::Frames(random_frames(&mut rng, 6, 3)),
            tgt: random_simplex(&mut rng, 8, 4),
        };
        assert!(matches!(
            model.batch_loss(&[bad], None),
            Err(AlignmentError::ShapeError(_))
        ));
    }

    #[test]
    fn single_pair_overfit_reaches_tiny_loss() {
        // Target set to the model's own teacher-forced prediction keeps it
        // reachable, so 200 steps mostly drive the stop flags down. The
        // stop head gets a boosted per-scope lr (its logits must saturate)
        // while the trunk anneals to polish the L1 term.
        let mut rng = Prng::seed_from_u64(5);
        let mut model = AlignmentModel::new(tiny_config(5, 4), 11);
        let src = SourceSeq::Frames(random_frames(&mut rng, 5, 5));
        let seed_tgt = random_simplex(&mut rng, 6, 4);
        let (reachable, _) = model.teacher_forced_prediction(&src, &seed_tgt).unwrap();
        let pair = AlignPair {
            id: "p".into(),
            src,
            tgt: reachable,
        };
        let base_lr = 0.015;
        let mut adam = crate::nn::Adam::new(&model.store, base_lr);
        adam.lr_scales = vec![("decoder.stop".to_string(), 8.0)];
        let mut last = f64::INFINITY;
        for step in 0..200usize {
            adam.lr = if step < 10 {
                base_lr * (step + 1) as f64 / 10.0
            } else if step < 120 {
                base_lr
            } else {
                base_lr * 0.93f64.powi((step - 120) as i32)
            };
            let mut grads = model.store.zero_gradients();
            last = model.batch_loss(std::slice::from_ref(&pair), Some(&mut grads)).unwrap();
            adam.step(&mut model.store, &grads, &[]);
        }
        assert!(last < 1e-3, "overfit loss {last}");
    }

    #[test]
    fn decoder_is_causal_in_teacher_forced_inputs() {
        // Perturbing the teacher-forced decoder input at step t changes
        // outputs only at steps >= t.
        let mut rng = Prng::seed_from_u64(6);
        let model = AlignmentModel::new(tiny_config(5, 4), 13);
        let src = random_frames(&mut rng, 6, 5);
        let tgt = random_simplex(&mut rng, 7, 4);
        let base = model.teacher_forced_prediction(&SourceSeq::Frames(src.clone()), &tgt).unwrap();
        for t in 0..tgt.rows {
            let mut perturbed = tgt.clone();
            perturbed.row_mut(t).iter_mut().for_each(|v| *v += 0.25);
            let out = model.teacher_forced_prediction(&SourceSeq::Frames(src.clone()), &perturbed).unwrap();
            // Teacher input at step s is target frame s-1, so perturbing
            // target frame t first enters at output step t+1.
            for r in 0..(t + 1).min(base.0.rows) {
                assert_eq!(base.0.row(r), out.0.row(r), "output {r} changed by perturbation at {t}");
            }
            if t + 1 < base.0.rows {
                assert_ne!(base.0.row(t + 1), out.0.row(t + 1));
            }
        }
    }

    #[test]
    fn convert_determinism_and_truncation() {
        let mut rng = Prng::seed_from_u64(7);
        let model = AlignmentModel::new(tiny_config(5, 4), 17);
        let src = random_frames(&mut rng, 6, 5);
        let a = model.convert(&SourceSeq::Frames(src.clone()), 30).unwrap();
        let b = model.convert(&SourceSeq::Frames(src.clone()), 30).unwrap();
        assert_eq!(a.frames, b.frames);
        let one = model.convert(&SourceSeq::Frames(src.clone()), 1).unwrap();
        assert_eq!(one.frames.rows, 1);
        assert!(one.truncated);
        // Simplex outputs stay normalized.
        for r in 0..a.frames.rows {
            let sum: f64 = a.frames.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            model.convert(&SourceSeq::Frames(Mat::zeros(0, 5)), 10),
            Err(AlignmentError::EmptyInput)
        ));
    }

    #[test]
    fn checkpoint_lineage_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = AlignmentModel::new(tiny_config(5, 4), 19);
        model.lineage.push("pretrain_parallel_vc".to_string());
        model.lineage.push("ft_synthetic_el".to_string());
        let path = dir.path().join("align.ckpt");
        model.save(&path).unwrap();
        let back = AlignmentModel::load(&path).unwrap();
        assert_eq!(back.lineage, model.lineage);
        assert_eq!(back.config.output_dim, 4);
        let mut rng = Prng::seed_from_u64(20);
        let src = random_frames(&mut rng, 5, 5);
        let a = model.convert(&SourceSeq::Frames(src.clone()), 20).unwrap();
        let b = back.convert(&SourceSeq::Frames(src), 20).unwrap();
        assert_eq!(a.frames, b.frames);
    }
}
