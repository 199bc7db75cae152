//! Alignment model architecture and inference.

use super::AlignmentError;
use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::corpus::PhoneId;
use crate::mat::Mat;
use crate::nn::{
    causal_mask, positional_encoding, DecoderBlock, EncoderBlock, Gradients, Graph,
    LayerNormLayer, LinearLayer, NodeId, ParamStore,
};
use crate::rng::Prng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What a sequence of frames represents; decides head shape and rate
/// accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Bnf,
    Mel,
    /// Soft content units (simplex rows).
    Units,
}

/// Training stages; pretraining happens once, fine-tuning in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStage {
    PretrainParallelVc,
    PretrainTts,
    PretrainAe,
    FtSyntheticEl,
    FtTargetEl,
}

impl AlignStage {
    pub fn name(&self) -> &'static str {
        match self {
            AlignStage::PretrainParallelVc => "pretrain_parallel_vc",
            AlignStage::PretrainTts => "pretrain_tts",
            AlignStage::PretrainAe => "pretrain_ae",
            AlignStage::FtSyntheticEl => "ft_synthetic_el",
            AlignStage::FtTargetEl => "ft_target_el",
        }
    }

    pub fn is_pretrain(&self) -> bool {
        matches!(
            self,
            AlignStage::PretrainParallelVc | AlignStage::PretrainTts | AlignStage::PretrainAe
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub input_kind: FeatureKind,
    pub output_kind: FeatureKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Symbol inventory for the TTS pretraining encoder.
    pub vocab: usize,
    pub stop_threshold: f64,
    /// Decoding cap as a multiple of the subsampling-adjusted input length.
    pub max_frames_factor: f64,
    /// Frames of original feature rate per input frame (4 for BNFs from a
    /// x4-subsampling recognizer, 1 for mel inputs).
    pub input_subsample_factor: usize,
}

impl AlignmentConfig {
    pub fn desk_default(input_kind: FeatureKind, output_kind: FeatureKind, input_dim: usize, output_dim: usize, input_subsample_factor: usize) -> Self {
        AlignmentConfig {
            input_kind,
            output_kind,
            input_dim,
            output_dim,
            d_model: 48,
            heads: 4,
            d_ff: 192,
            encoder_blocks: 6,
            decoder_blocks: 6,
            vocab: crate::corpus::phones::inventory_size(),
            stop_threshold: 0.5,
            max_frames_factor: 3.0,
            input_subsample_factor,
        }
    }

    /// Cap on decoded frames for a given input length.
    pub fn max_frames_for(&self, input_len: usize) -> usize {
        ((input_len * self.input_subsample_factor) as f64 * self.max_frames_factor).ceil() as usize
    }
}

/// Source side of a training pair or conversion call.
#[derive(Debug, Clone)]
pub enum SourceSeq {
    /// Continuous frames (BNF or mel rows).
    Frames(Mat),
    /// Transcript symbols (TTS pretraining).
    Symbols(Vec<PhoneId>),
}

impl SourceSeq {
    pub fn len(&self) -> usize {
        match self {
            SourceSeq::Frames(m) => m.rows,
            SourceSeq::Symbols(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Arch {
    input_proj: LinearLayer,
    sym_embed: usize,
    enc_blocks: Vec<EncoderBlock>,
    enc_ln: LayerNormLayer,
    dec_in: LinearLayer,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNormLayer,
    out_head: LinearLayer,
    stop_head: LinearLayer,
}

pub struct AlignmentModel {
    pub config: AlignmentConfig,
    pub store: ParamStore,
    /// Stage names applied so far, oldest first.
    pub lineage: Vec<String>,
    arch: Arch,
}

pub struct ConvertOutput {
    pub frames: Mat,
    pub truncated: bool,
}

fn build_arch(config: &AlignmentConfig, store: &mut ParamStore, rng: &mut Prng) -> Arch {
    let d = config.d_model;
    Arch {
        input_proj: LinearLayer::new(store, rng, "encoder.input", config.input_dim, d),
        sym_embed: store.add_glorot("sym_encoder.embed", config.vocab + 1, d, rng),
        enc_blocks: (0..config.encoder_blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("encoder.block{i}"), d, config.heads, config.d_ff))
            .collect(),
        enc_ln: LayerNormLayer::new(store, "encoder.final_ln", d),
        dec_in: LinearLayer::new(store, rng, "decoder.input", config.output_dim, d),
        dec_blocks: (0..config.decoder_blocks)
            .map(|i| DecoderBlock::new(store, rng, &format!("decoder.block{i}"), d, config.heads, config.d_ff))
            .collect(),
        dec_ln: LayerNormLayer::new(store, "decoder.final_ln", d),
        out_head: LinearLayer::new(store, rng, "decoder.out", d, config.output_dim),
        stop_head: LinearLayer::new(store, rng, "decoder.stop", d, 1),
    }
}

impl AlignmentModel {
    pub fn new(config: AlignmentConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = Prng::derive(seed, "alignment-init", 0);
        let arch = build_arch(&config, &mut store, &mut rng);
        AlignmentModel {
            config,
            store,
            lineage: Vec::new(),
            arch,
        }
    }

    pub fn with_store(config: AlignmentConfig, store: ParamStore, lineage: Vec<String>) -> Self {
        let mut probe = ParamStore::new();
        let mut rng = Prng::seed_from_u64(0);
        let arch = build_arch(&config, &mut probe, &mut rng);
        assert_eq!(probe.len(), store.len(), "store layout mismatch");
        AlignmentModel {
            config,
            store,
            lineage,
            arch,
        }
    }

    fn check_src(&self, src: &SourceSeq) -> Result<(), AlignmentError> {
        if src.is_empty() {
            return Err(AlignmentError::EmptyInput);
        }
        if let SourceSeq::Frames(m) = src {
            if m.cols != self.config.input_dim {
                return Err(AlignmentError::ShapeError(format!(
                    "input dim {} vs configured {}",
                    m.cols, self.config.input_dim
                )));
            }
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph, src: &SourceSeq) -> NodeId {
        let mut h = match src {
            SourceSeq::Frames(m) => {
                let x = g.input(m.clone());
                self.arch.input_proj.apply(g, x)
            }
            SourceSeq::Symbols(tokens) => {
                let idx: Vec<usize> = tokens.iter().map(|&p| p as usize).collect();
                let table = g.param(self.arch.sym_embed);
                g.gather_rows(table, &idx)
            }
        };
        let pe = g.input(positional_encoding(src.len(), self.config.d_model));
        h = g.add(h, pe);
        for block in &self.arch.enc_blocks {
            h = block.apply(g, h);
        }
        self.arch.enc_ln.apply(g, h)
    }

    /// Decoder over shifted teacher-forced inputs; returns (frame output
    /// pre-normalization handled, stop logits) node ids.
    fn decode_sequence(&self, g: &mut Graph, memory: NodeId, teacher_inputs: NodeId, t_len: usize) -> (NodeId, NodeId) {
        let mut h = self.arch.dec_in.apply(g, teacher_inputs);
        let pe = g.input(positional_encoding(t_len, self.config.d_model));
        h = g.add(h, pe);
        let mask = causal_mask(t_len);
        for block in &self.arch.dec_blocks {
            h = block.apply(g, h, memory, &mask);
        }
        let h = self.arch.dec_ln.apply(g, h);
        let raw = self.arch.out_head.apply(g, h);
        let frames = match self.config.output_kind {
            FeatureKind::Units => g.softmax(raw),
            _ => raw,
        };
        let stop = self.arch.stop_head.apply(g, h);
        (frames, stop)
    }

    /// Teacher-forced prediction for a target sequence: returns predicted
    /// frames and stop logits.
    pub fn teacher_forced_prediction(&self, src: &SourceSeq, tgt: &Mat) -> Result<(Mat, Mat), AlignmentError> {
        self.check_src(src)?;
        if tgt.cols != self.config.output_dim {
            return Err(AlignmentError::ShapeError(format!(
                "target dim {} vs configured {}",
                tgt.cols, self.config.output_dim
            )));
        }
        let mut g = Graph::new(&self.store);
        let memory = self.encode(&mut g, src);
        let teacher = g.input(shift_right(tgt));
        let (frames, stop) = self.decode_sequence(&mut g, memory, teacher, tgt.rows);
        Ok((g.value(frames).clone(), g.value(stop).clone()))
    }

    /// Mean teacher-forced loss over a batch: L1 on output frames plus
    /// binary cross-entropy on the stop flag, weight 1.0 each. Optionally
    /// accumulates gradients.
    pub fn batch_loss(&self, pairs: &[super::AlignPair], grads: Option<&mut Gradients>) -> Result<f64, AlignmentError> {
        if pairs.is_empty() {
            return Err(AlignmentError::ConfigError("empty batch".into()));
        }
        let weight = 1.0 / pairs.len() as f64;
        let results: Result<Vec<(f64, Option<Gradients>)>, AlignmentError> = pairs
            .par_iter()
            .map(|pair| {
                self.check_src(&pair.src)?;
                if pair.tgt.cols != self.config.output_dim {
                    return Err(AlignmentError::ShapeError(format!(
                        "pair {}: target dim {} vs configured {}",
                        pair.id, pair.tgt.cols, self.config.output_dim
                    )));
                }
                let mut g = Graph::new(&self.store);
                let memory = self.encode(&mut g, &pair.src);
                let teacher = g.input(shift_right(&pair.tgt));
                let (frames, stop) = self.decode_sequence(&mut g, memory, teacher, pair.tgt.rows);
                let target = g.input(pair.tgt.clone());
                let l1 = g.l1_loss(frames, target);
                let stop_bce = g.bce_with_logits(stop, &super::train::stop_labels(pair.tgt.rows));
                let total = g.add(l1, stop_bce);
                let value = g.scalar_value(total);
                if grads.is_some() {
                    let mut local = self.store.zero_gradients();
                    g.backward(total, weight, &mut local);
                    Ok((value, Some(local)))
                } else {
                    Ok((value, None))
                }
            })
            .collect();
        let results = results?;
        let mut loss = 0.0;
        for (v, _) in &results {
            loss += weight * v;
        }
        if let Some(accum) = grads {
            for (_, local) in results {
                if let Some(local) = local {
                    for (acc, l) in accum.iter_mut().zip(&local) {
                        acc.add_assign(l);
                    }
                }
            }
        }
        Ok(loss)
    }

    /// Greedy autoregressive conversion: emits frames until the stop
    /// probability crosses the threshold or `max_frames` is hit (which
    /// sets the truncation flag). Unit-kind outputs are renormalized to
    /// sum to one.
    pub fn convert(&self, src: &SourceSeq, max_frames: usize) -> Result<ConvertOutput, AlignmentError> {
        self.check_src(src)?;
        if max_frames == 0 {
            return Err(AlignmentError::ConfigError("max_frames must be > 0".into()));
        }
        // Encoder runs once; its output is a constant for decoding.
        let memory_value = {
            let mut g = Graph::new(&self.store);
            let memory = self.encode(&mut g, src);
            g.value(memory).clone()
        };
        let d_out = self.config.output_dim;
        let mut emitted = Mat::zeros(0, d_out);
        let mut truncated = false;
        loop {
            let t_len = emitted.rows + 1;
            let mut teacher = Mat::zeros(t_len, d_out);
            for r in 0..emitted.rows {
                teacher.row_mut(r + 1).copy_from_slice(emitted.row(r));
            }
            let (frame, stop_logit) = {
                let mut g = Graph::new(&self.store);
                let memory = g.input(memory_value.clone());
                let teacher = g.input(teacher);
                let (frames, stop) = self.decode_sequence(&mut g, memory, teacher, t_len);
                let fv = g.value(frames);
                let sv = g.value(stop);
                (fv.row(t_len - 1).to_vec(), sv.data[(t_len - 1) * sv.cols])
            };
            let mut row = frame;
            if self.config.output_kind == FeatureKind::Units {
                let sum: f64 = row.iter().map(|v| v.max(0.0)).sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|v| *v = v.max(0.0) / sum);
                }
            }
            let mut grown = Mat::zeros(emitted.rows + 1, d_out);
            grown.data[..emitted.data.len()].copy_from_slice(&emitted.data);
            grown.row_mut(emitted.rows).copy_from_slice(&row);
            emitted = grown;
            let stop_prob = 1.0 / (1.0 + (-stop_logit).exp());
            if stop_prob > self.config.stop_threshold {
                break;
            }
            if emitted.rows >= max_frames {
                truncated = true;
                break;
            }
        }
        Ok(ConvertOutput {
            frames: emitted,
            truncated,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AlignmentError> {
        let meta = serde_json::json!({
            "kind": "alignment",
            "config": self.config,
            "lineage": self.lineage,
        });
        save_checkpoint(path, &meta, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AlignmentError> {
        let ckpt = load_checkpoint(path)?;
        let config: AlignmentConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| AlignmentError::ConfigError(format!("bad checkpoint config: {e}")))?;
        let lineage: Vec<String> = serde_json::from_value(ckpt.meta["lineage"].clone()).unwrap_or_default();
        Ok(AlignmentModel::with_store(config, ckpt.params, lineage))
    }
}

/// Teacher-forcing input: target shifted right with a zero start frame.
fn shift_right(tgt: &Mat) -> Mat {
    let mut out = Mat::zeros(tgt.rows, tgt.cols);
    for r in 1..tgt.rows {
        out.row_mut(r).copy_from_slice(tgt.row(r - 1));
    }
    out
}
