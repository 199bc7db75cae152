//! Dataset assembly: turns manifest entry groups into the per-module
//! training structures (features are extracted on the fly and cached by
//! the surrounding stage directories).

use super::PipelineError;
use crate::alignment::{AlignPair, FeatureKind, SourceSeq};
use crate::corpus::{Manifest, ManifestEntry, Split};
use crate::dsp::{mel_spectrogram, DspParams};
use crate::mat::Mat;
use crate::recognition::RecognizerModel;
use crate::synthesis::{speaker_embedding, SpeakerEmbedding, SynthItem};
use crate::units::{extract_units, UnitCodebook};
use rayon::prelude::*;
use std::collections::HashMap;

/// Which parallel pair group feeds an alignment stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentDataKind {
    /// vc_src_* -> vc_tgt_* (two typical speakers, train only).
    ParallelVc,
    /// Transcripts -> target-speaker features (TTS pretraining).
    TtsToTarget,
    /// Target-speaker features -> target-speaker features (AE).
    TargetAutoencode,
    /// synel_el_* -> synel_typ_*.
    SyntheticEl,
    /// tgt_el_<split> -> tgt_typ_<split>.
    TargetEl(Split),
}

fn entry_mel(manifest: &Manifest, entry: &ManifestEntry, dsp: &DspParams) -> Result<Mat, PipelineError> {
    let utt = manifest
        .load_utterance(entry)
        .map_err(|e| PipelineError::stage("features", e))?;
    Ok(mel_spectrogram(&utt.waveform, dsp)
        .map_err(|e| PipelineError::stage("features", e))?
        .frames)
}

/// Source-side features for the alignment model.
fn source_features(
    manifest: &Manifest,
    entry: &ManifestEntry,
    kind: FeatureKind,
    recognizer: Option<&RecognizerModel>,
    dsp: &DspParams,
) -> Result<Mat, PipelineError> {
    let mel = entry_mel(manifest, entry, dsp)?;
    match kind {
        FeatureKind::Mel => Ok(mel),
        FeatureKind::Bnf => {
            let recognizer = recognizer
                .ok_or_else(|| PipelineError::Config("BNF inputs need a recognizer".into()))?;
            recognizer
                .extract_bnf(&mel)
                .map_err(|e| PipelineError::stage("bnf", e))
        }
        FeatureKind::Units => Err(PipelineError::Config("units are not an input feature".into())),
    }
}

/// Target-side features for the alignment model.
fn target_features(
    manifest: &Manifest,
    entry: &ManifestEntry,
    kind: FeatureKind,
    codebook: Option<&UnitCodebook>,
    dsp: &DspParams,
) -> Result<Mat, PipelineError> {
    match kind {
        FeatureKind::Mel => entry_mel(manifest, entry, dsp),
        FeatureKind::Units => {
            let codebook =
                codebook.ok_or_else(|| PipelineError::Config("unit outputs need a codebook".into()))?;
            let utt = manifest
                .load_utterance(entry)
                .map_err(|e| PipelineError::stage("features", e))?;
            Ok(extract_units(codebook, &utt.waveform, dsp)
                .map_err(|e| PipelineError::stage("units", e))?
                .frames)
        }
        FeatureKind::Bnf => Err(PipelineError::Config("BNFs are not an output feature".into())),
    }
}

/// Builds parallel pairs for one alignment stage and system configuration.
pub fn alignment_pairs_for(
    manifest: &Manifest,
    data_kind: AlignmentDataKind,
    input_kind: FeatureKind,
    output_kind: FeatureKind,
    recognizer: Option<&RecognizerModel>,
    codebook: Option<&UnitCodebook>,
    dsp: &DspParams,
) -> Result<Vec<AlignPair>, PipelineError> {
    // (source entry, target entry, use transcript as source?)
    let mut plan: Vec<(&ManifestEntry, &ManifestEntry, bool)> = Vec::new();
    match data_kind {
        AlignmentDataKind::ParallelVc => {
            for entry in &manifest.entries {
                if entry.utterance_id.starts_with("vc_src_") {
                    let tgt = entry
                        .parallel_id
                        .as_ref()
                        .and_then(|id| manifest.entry(id))
                        .ok_or_else(|| PipelineError::Config(format!("{} has no vc target", entry.utterance_id)))?;
                    plan.push((entry, tgt, false));
                }
            }
        }
        AlignmentDataKind::TtsToTarget => {
            for entry in &manifest.entries {
                if (entry.utterance_id.starts_with("tgt_typ_train") || entry.utterance_id.starts_with("synel_typ_"))
                    && entry.split == Split::Train
                {
                    plan.push((entry, entry, true));
                }
            }
        }
        AlignmentDataKind::TargetAutoencode => {
            for entry in &manifest.entries {
                if (entry.utterance_id.starts_with("tgt_typ_train") || entry.utterance_id.starts_with("synel_typ_"))
                    && entry.split == Split::Train
                {
                    plan.push((entry, entry, false));
                }
            }
        }
        AlignmentDataKind::SyntheticEl => {
            for entry in &manifest.entries {
                if entry.utterance_id.starts_with("synel_el_") {
                    let tgt = entry
                        .parallel_id
                        .as_ref()
                        .and_then(|id| manifest.entry(id))
                        .ok_or_else(|| PipelineError::Config(format!("{} has no parallel", entry.utterance_id)))?;
                    plan.push((entry, tgt, false));
                }
            }
        }
        AlignmentDataKind::TargetEl(split) => {
            for entry in &manifest.entries {
                if entry.utterance_id.starts_with("tgt_el_") && entry.split == split {
                    let tgt = entry
                        .parallel_id
                        .as_ref()
                        .and_then(|id| manifest.entry(id))
                        .ok_or_else(|| PipelineError::Config(format!("{} has no parallel", entry.utterance_id)))?;
                    plan.push((entry, tgt, false));
                }
            }
        }
    }
    plan.par_iter()
        .map(|(src, tgt, symbols)| {
            let source = if *symbols {
                SourceSeq::Symbols(
                    crate::corpus::parse_transcript(&src.transcript)
                        .ok_or_else(|| PipelineError::Config(format!("bad transcript {}", src.utterance_id)))?,
                )
            } else {
                SourceSeq::Frames(source_features(manifest, src, input_kind, recognizer, dsp)?)
            };
            let target = target_features(manifest, tgt, output_kind, codebook, dsp)?;
            Ok(AlignPair {
                id: src.utterance_id.clone(),
                src: source,
                tgt: target,
            })
        })
        .collect()
}

/// Builds diffusion training items: mel targets, frame-aligned units, and
/// per-speaker embeddings computed from each speaker's own utterances.
pub fn synth_items_for(
    manifest: &Manifest,
    entries: &[&ManifestEntry],
    codebook: &UnitCodebook,
    spk_dim: usize,
    dsp: &DspParams,
) -> Result<Vec<SynthItem>, PipelineError> {
    // Speaker embeddings from all of each speaker's listed utterances.
    let mut by_speaker: HashMap<&str, Vec<&ManifestEntry>> = HashMap::new();
    for e in entries {
        by_speaker.entry(e.speaker_id.as_str()).or_default().push(e);
    }
    let mut speaker_ids: Vec<&str> = by_speaker.keys().copied().collect();
    speaker_ids.sort_unstable();
    let embeddings: Result<Vec<(String, SpeakerEmbedding)>, PipelineError> = speaker_ids
        .par_iter()
        .map(|spk| {
            let waveforms: Result<Vec<Vec<f64>>, PipelineError> = by_speaker[spk]
                .iter()
                .map(|e| {
                    Ok(manifest
                        .load_utterance(e)
                        .map_err(|err| PipelineError::stage("features", err))?
                        .waveform)
                })
                .collect();
            let emb = speaker_embedding(&waveforms?, spk_dim, dsp)
                .map_err(|e| PipelineError::stage("speaker-embedding", e))?;
            Ok((spk.to_string(), emb))
        })
        .collect();
    let embeddings: HashMap<String, SpeakerEmbedding> = embeddings?.into_iter().collect();

    entries
        .par_iter()
        .map(|entry| {
            let utt = manifest
                .load_utterance(entry)
                .map_err(|e| PipelineError::stage("features", e))?;
            let mel = mel_spectrogram(&utt.waveform, dsp)
                .map_err(|e| PipelineError::stage("features", e))?
                .frames;
            let units = extract_units(codebook, &utt.waveform, dsp)
                .map_err(|e| PipelineError::stage("units", e))?;
            let units = crate::synthesis::interpolate_units(&units.frames, mel.rows)
                .map_err(|e| PipelineError::stage("units", e))?;
            Ok(SynthItem {
                id: utt.id,
                speaker_id: entry.speaker_id.clone(),
                mel,
                units,
                spk: embeddings[&entry.speaker_id].clone(),
            })
        })
        .collect()
}
