//! Recognizer architecture: subsampling encoder, CTC and speech-type-ID
//! heads over the encoder, and an autoregressive attention decoder over
//! the BNF projection.

use super::train::RecItem;
use super::{LossBreakdown, RecognitionError};
use crate::ckpt::{load_checkpoint, save_checkpoint};
use crate::corpus::{PhoneId, SpeechType};
use crate::mat::Mat;
use crate::nn::{
    causal_mask, ctc_forward_backward, ctc_greedy_collapse, positional_encoding, DecoderBlock,
    EncoderBlock, Gradients, Graph, LayerNormLayer, LinearLayer, NodeId, ParamStore,
};
use crate::rng::Prng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Temporal subsampling factor of the encoder front end.
    pub subsample: usize,
    /// Width of the penultimate projection exported as BNFs.
    pub bnf_dim: usize,
    /// Symbol inventory size (CTC adds a blank, the decoder adds eos).
    pub vocab: usize,
    /// Weight of the speech-type-ID term in mixed-batch losses.
    pub sid_weight: f64,
    /// CTC weight in joint beam rescoring.
    pub ctc_decode_weight: f64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            n_mels: 80,
            d_model: 128,
            heads: 4,
            d_ff: 256,
            encoder_blocks: 4,
            decoder_blocks: 2,
            subsample: 4,
            bnf_dim: 64,
            vocab: crate::corpus::phones::inventory_size(),
            sid_weight: 1.0,
            ctc_decode_weight: 0.3,
        }
    }
}

struct Arch {
    input_proj: LinearLayer,
    enc_blocks: Vec<EncoderBlock>,
    enc_ln: LayerNormLayer,
    bnf_proj: LinearLayer,
    ctc_head: LinearLayer,
    sid_head: LinearLayer,
    /// Decoder token embeddings: vocab symbols + sos + eos rows.
    embed: usize,
    memory_proj: LinearLayer,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNormLayer,
    dec_out: LinearLayer,
}

pub struct RecognizerModel {
    pub config: RecognizerConfig,
    pub store: ParamStore,
    arch: Arch,
}

pub struct ForwardOutput {
    pub ctc_logits: Vec<Mat>,
    pub attn_logits: Vec<Mat>,
    pub sid_logits: Vec<f64>,
    pub bnf: Vec<Mat>,
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

fn build_arch(config: &RecognizerConfig, store: &mut ParamStore, rng: &mut Prng) -> Arch {
    let d = config.d_model;
    Arch {
        input_proj: LinearLayer::new(store, rng, "encoder.input", config.n_mels * config.subsample, d),
        enc_blocks: (0..config.encoder_blocks)
            .map(|i| EncoderBlock::new(store, rng, &format!("encoder.block{i}"), d, config.heads, config.d_ff))
            .collect(),
        enc_ln: LayerNormLayer::new(store, "encoder.final_ln", d),
        bnf_proj: LinearLayer::new(store, rng, "encoder.bnf", d, config.bnf_dim),
        ctc_head: LinearLayer::new(store, rng, "ctc.head", config.bnf_dim, config.vocab + 1),
        sid_head: LinearLayer::new(store, rng, "sid.head", d, 1),
        embed: store.add_glorot("decoder.embed", config.vocab + 2, d, rng),
        memory_proj: LinearLayer::new(store, rng, "decoder.memory", config.bnf_dim, d),
        dec_blocks: (0..config.decoder_blocks)
            .map(|i| DecoderBlock::new(store, rng, &format!("decoder.block{i}"), d, config.heads, config.d_ff))
            .collect(),
        dec_ln: LayerNormLayer::new(store, "decoder.final_ln", d),
        dec_out: LinearLayer::new(store, rng, "decoder.out", d, config.vocab + 1),
    }
}

impl RecognizerModel {
    pub fn new(config: RecognizerConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = Prng::derive(seed, "recognizer-init", 0);
        let arch = build_arch(&config, &mut store, &mut rng);
        RecognizerModel { config, store, arch }
    }

    /// Rebuilds the layer handles over an existing store with the same
    /// layout (used by checkpoint loading and gradient probes).
    pub fn with_store(config: RecognizerConfig, store: ParamStore) -> Self {
        let mut probe = ParamStore::new();
        let mut rng = Prng::seed_from_u64(0);
        let arch = build_arch(&config, &mut probe, &mut rng);
        assert_eq!(probe.len(), store.len(), "store layout mismatch");
        RecognizerModel { config, store, arch }
    }

    pub fn sos_token(&self) -> usize {
        self.config.vocab
    }

    pub fn eos_class(&self) -> usize {
        self.config.vocab
    }

    fn check_features(&self, mel: &Mat) -> Result<(), RecognitionError> {
        if mel.cols != self.config.n_mels {
            return Err(RecognitionError::ShapeError(format!(
                "expected {} mel bins, got {}",
                self.config.n_mels, mel.cols
            )));
        }
        if mel.rows == 0 {
            return Err(RecognitionError::EmptyInput);
        }
        Ok(())
    }

    /// Encoder: stacked frames -> projection -> blocks -> final LN.
    /// Returns (encoder output, bnf) node ids.
    fn encode(&self, g: &mut Graph, mel: &Mat) -> (NodeId, NodeId) {
        let sub = self.config.subsample;
        let t_out = mel.rows.div_ceil(sub);
        let x = g.input(mel.clone());
        let stacked = g.unfold(x, sub, sub, 0, t_out);
        let mut h = self.arch.input_proj.apply(g, stacked);
        let pe = g.input(positional_encoding(t_out, self.config.d_model));
        h = g.add(h, pe);
        for block in &self.arch.enc_blocks {
            h = block.apply(g, h);
        }
        let enc = self.arch.enc_ln.apply(g, h);
        let bnf = self.arch.bnf_proj.apply(g, enc);
        (enc, bnf)
    }

    /// Teacher-forced decoder logits over [sos, y1..yL] -> (L+1) x (vocab+1).
    fn decode_teacher_forced(&self, g: &mut Graph, bnf: NodeId, transcript: &[PhoneId]) -> NodeId {
        let memory = self.arch.memory_proj.apply(g, bnf);
        let mut tokens = vec![self.sos_token()];
        tokens.extend(transcript.iter().map(|&p| p as usize));
        let table = g.param(self.arch.embed);
        let mut h = g.gather_rows(table, &tokens);
        let pe = g.input(positional_encoding(tokens.len(), self.config.d_model));
        h = g.add(h, pe);
        let mask = causal_mask(tokens.len());
        for block in &self.arch.dec_blocks {
            h = block.apply(g, h, memory, &mask);
        }
        let h = self.arch.dec_ln.apply(g, h);
        self.arch.dec_out.apply(g, h)
    }

    fn sid_logit(&self, g: &mut Graph, enc: NodeId) -> NodeId {
        let pooled = g.mean_rows(enc);
        self.arch.sid_head.apply(g, pooled)
    }

    /// Deterministic evaluation-mode forward over a batch.
    pub fn forward(&self, batch: &[RecItem]) -> Result<ForwardOutput, RecognitionError> {
        if batch.is_empty() {
            return Err(RecognitionError::EmptyBatch);
        }
        let mut out = ForwardOutput {
            ctc_logits: Vec::with_capacity(batch.len()),
            attn_logits: Vec::with_capacity(batch.len()),
            sid_logits: Vec::with_capacity(batch.len()),
            bnf: Vec::with_capacity(batch.len()),
        };
        for item in batch {
            self.check_features(&item.mel)?;
            let mut g = Graph::new(&self.store);
            let (enc, bnf) = self.encode(&mut g, &item.mel);
            let ctc = self.arch.ctc_head.apply(&mut g, bnf);
            let attn = self.decode_teacher_forced(&mut g, bnf, &item.transcript);
            let sid = self.sid_logit(&mut g, enc);
            out.ctc_logits.push(g.value(ctc).clone());
            out.attn_logits.push(g.value(attn).clone());
            out.sid_logits.push(g.scalar_value(sid));
            out.bnf.push(g.value(bnf).clone());
        }
        Ok(out)
    }

    /// Per-utterance loss graph. Weights scale each term's contribution to
    /// the scalar that gets backpropagated.
    fn utterance_loss(
        &self,
        item: &RecItem,
        w_sid: f64,
        w_ctc: f64,
        w_attn: f64,
        grads: Option<&mut Gradients>,
    ) -> Result<(f64, f64, f64), RecognitionError> {
        self.check_features(&item.mel)?;
        let mut g = Graph::new(&self.store);
        let (enc, bnf) = self.encode(&mut g, &item.mel);
        let mut terms: Vec<(NodeId, f64)> = Vec::new();
        let (mut sid_v, mut ctc_v, mut attn_v) = (0.0, 0.0, 0.0);
        if w_sid != 0.0 {
            let sid = self.sid_logit(&mut g, enc);
            let label = if item.speech_type == SpeechType::El { 1.0 } else { 0.0 };
            let sid_loss = g.bce_with_logits(sid, &[label]);
            sid_v = g.scalar_value(sid_loss);
            terms.push((sid_loss, w_sid));
        }
        if w_ctc != 0.0 {
            let ctc_logits = self.arch.ctc_head.apply(&mut g, bnf);
            let labels: Vec<usize> = item.transcript.iter().map(|&p| p as usize).collect();
            let ctc_loss = g.ctc_loss(ctc_logits, &labels);
            ctc_v = g.scalar_value(ctc_loss);
            terms.push((ctc_loss, w_ctc));
        }
        if w_attn != 0.0 {
            let attn_logits = self.decode_teacher_forced(&mut g, bnf, &item.transcript);
            let mut targets: Vec<usize> = item.transcript.iter().map(|&p| p as usize).collect();
            targets.push(self.eos_class());
            let attn_loss = g.cross_entropy_rows(attn_logits, &targets);
            attn_v = g.scalar_value(attn_loss);
            terms.push((attn_loss, w_attn));
        }
        if let Some(accum) = grads {
            for (node, weight) in &terms {
                g.backward(*node, *weight, accum);
            }
        }
        Ok((sid_v, ctc_v, attn_v))
    }

    /// Batch loss under a training mode, optionally with gradients.
    ///
    /// Term normalization: SID averages over the whole batch; CTC and
    /// attention average over the utterances they apply to (the EL subset
    /// in intermediate mode, everything otherwise).
    pub fn batch_loss(
        &self,
        batch: &[RecItem],
        mode: super::LossMode,
        grads: Option<&mut Gradients>,
    ) -> Result<LossBreakdown, RecognitionError> {
        use super::LossMode;
        if batch.is_empty() {
            return Err(RecognitionError::EmptyBatch);
        }
        let b = batch.len() as f64;
        let n_el = batch.iter().filter(|i| i.speech_type == SpeechType::El).count() as f64;
        let weights: Vec<(f64, f64, f64)> = batch
            .iter()
            .map(|item| {
                let el = item.speech_type == SpeechType::El;
                match mode {
                    LossMode::Standard => (0.0, 1.0 / b, 1.0 / b),
                    LossMode::Intermediate => {
                        let seq = if el && n_el > 0.0 { 1.0 / n_el } else { 0.0 };
                        (self.config.sid_weight / b, seq, seq)
                    }
                    LossMode::IntermediateNoMask => (self.config.sid_weight / b, 1.0 / b, 1.0 / b),
                }
            })
            .collect();

        let results: Result<Vec<((f64, f64, f64), Option<Gradients>)>, RecognitionError> = batch
            .par_iter()
            .zip(&weights)
            .map(|(item, &(ws, wc, wa))| {
                if grads.is_some() {
                    let mut local = self.store.zero_gradients();
                    let terms = self.utterance_loss(item, ws, wc, wa, Some(&mut local))?;
                    Ok((terms, Some(local)))
                } else {
                    Ok((self.utterance_loss(item, ws, wc, wa, None)?, None))
                }
            })
            .collect();
        let results = results?;

        let mut breakdown = LossBreakdown::default();
        for (((sid, ctc, attn), _), &(ws, wc, wa)) in results.iter().zip(&weights) {
            breakdown.sid += ws * sid;
            breakdown.ctc += wc * ctc;
            breakdown.attn += wa * attn;
        }
        breakdown.total = breakdown.sid + breakdown.ctc + breakdown.attn;
        if let Some(accum) = grads {
            for (_, local) in results {
                if let Some(local) = local {
                    for (acc, l) in accum.iter_mut().zip(&local) {
                        acc.add_assign(l);
                    }
                }
            }
        }
        Ok(breakdown)
    }

    /// BNFs for one utterance: penultimate projection per subsampled frame.
    pub fn extract_bnf(&self, mel: &Mat) -> Result<Mat, RecognitionError> {
        self.check_features(mel)?;
        let mut g = Graph::new(&self.store);
        let (_, bnf) = self.encode(&mut g, mel);
        Ok(g.value(bnf).clone())
    }

    /// Speech-type logit for one utterance.
    pub fn sid_logit_for(&self, mel: &Mat) -> Result<f64, RecognitionError> {
        self.check_features(mel)?;
        let mut g = Graph::new(&self.store);
        let (enc, _) = self.encode(&mut g, mel);
        let sid = self.sid_logit(&mut g, enc);
        Ok(g.scalar_value(sid))
    }

    /// Greedy attention decoding (beam width 1 follows this path exactly).
    pub fn attention_greedy(&self, mel: &Mat) -> Result<Vec<PhoneId>, RecognitionError> {
        self.check_features(mel)?;
        let max_len = 2 * mel.rows.div_ceil(self.config.subsample) + 5;
        let mut tokens: Vec<usize> = vec![self.sos_token()];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let next = {
                let mut g = Graph::new(&self.store);
                let (_, bnf) = self.encode(&mut g, mel);
                let logits = self.decode_step(&mut g, bnf, &tokens);
                argmax(&logits)
            };
            if next == self.eos_class() {
                break;
            }
            out.push(next as PhoneId);
            tokens.push(next);
        }
        Ok(out)
    }

    /// Logits of the next symbol given a token prefix.
    fn decode_step(&self, g: &mut Graph, bnf: NodeId, tokens: &[usize]) -> Vec<f64> {
        let memory = self.arch.memory_proj.apply(g, bnf);
        let table = g.param(self.arch.embed);
        let mut h = g.gather_rows(table, tokens);
        let pe = g.input(positional_encoding(tokens.len(), self.config.d_model));
        h = g.add(h, pe);
        let mask = causal_mask(tokens.len());
        for block in &self.arch.dec_blocks {
            h = block.apply(g, h, memory, &mask);
        }
        let h = self.arch.dec_ln.apply(g, h);
        let logits = self.arch.dec_out.apply(g, h);
        let last = g.slice_rows(logits, tokens.len() - 1, 1);
        let ls = g.log_softmax(last);
        g.value(ls).data.clone()
    }

    /// Decoding: greedy CTC collapse, or attention beam search with joint
    /// CTC rescoring (weight `ctc_decode_weight`).
    pub fn decode(&self, mel: &Mat, mode: DecodeMode) -> Result<Vec<PhoneId>, RecognitionError> {
        self.check_features(mel)?;
        match mode {
            DecodeMode::Greedy => {
                let mut g = Graph::new(&self.store);
                let (_, bnf) = self.encode(&mut g, mel);
                let logits = self.arch.ctc_head.apply(&mut g, bnf);
                let lv = g.value(logits);
                let frame_argmax: Vec<usize> = (0..lv.rows).map(|t| argmax(lv.row(t))).collect();
                Ok(ctc_greedy_collapse(&frame_argmax, self.config.vocab)
                    .into_iter()
                    .map(|s| s as PhoneId)
                    .collect())
            }
            DecodeMode::Beam { width } => self.beam_decode(mel, width.max(1)),
        }
    }

    fn beam_decode(&self, mel: &Mat, width: usize) -> Result<Vec<PhoneId>, RecognitionError> {
        let max_len = 2 * mel.rows.div_ceil(self.config.subsample) + 5;
        let ctc_logits = {
            let mut g = Graph::new(&self.store);
            let (_, bnf) = self.encode(&mut g, mel);
            let ctc = self.arch.ctc_head.apply(&mut g, bnf);
            g.value(ctc).clone()
        };
        // (tokens incl sos, attn log-prob, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(vec![self.sos_token()], 0.0, false)];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut candidates: Vec<(Vec<usize>, f64, bool)> = Vec::new();
            for (tokens, logp, finished) in &beams {
                if *finished {
                    candidates.push((tokens.clone(), *logp, true));
                    continue;
                }
                let step_logp = {
                    let mut g = Graph::new(&self.store);
                    let (_, bnf) = self.encode(&mut g, mel);
                    self.decode_step(&mut g, bnf, tokens)
                };
                let mut ranked: Vec<usize> = (0..step_logp.len()).collect();
                ranked.sort_by(|&a, &b| step_logp[b].partial_cmp(&step_logp[a]).unwrap());
                for &sym in ranked.iter().take(width) {
                    let mut next = tokens.clone();
                    let done = sym == self.eos_class();
                    if !done {
                        next.push(sym);
                    }
                    candidates.push((next, logp + step_logp[sym], done));
                }
            }
            candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            candidates.truncate(width);
            beams = candidates;
        }
        // Joint rescoring of final candidates.
        let w = self.config.ctc_decode_weight;
        let mut best: Option<(f64, Vec<PhoneId>)> = None;
        for (tokens, attn_logp, _) in &beams {
            let labels: Vec<usize> = tokens[1..].to_vec();
            let (ctc_nll, _) = ctc_forward_backward(&ctc_logits, &labels);
            let ctc_logp = if ctc_nll.is_finite() { -ctc_nll } else { -1e30 };
            let score = w * ctc_logp + (1.0 - w) * attn_logp;
            let seq: Vec<PhoneId> = labels.iter().map(|&s| s as PhoneId).collect();
            if best.as_ref().map(|(s, _)| score > *s).unwrap_or(true) {
                best = Some((score, seq));
            }
        }
        Ok(best.map(|(_, seq)| seq).unwrap_or_default())
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<(), RecognitionError> {
        let meta = serde_json::json!({
            "kind": "recognizer",
            "config": self.config,
            "extra": extra_meta,
        });
        save_checkpoint(path, &meta, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RecognitionError> {
        let ckpt = load_checkpoint(path)?;
        let config: RecognizerConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| RecognitionError::ConfigError(format!("bad checkpoint config: {e}")))?;
        Ok(RecognizerModel::with_store(config, ckpt.params))
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}
