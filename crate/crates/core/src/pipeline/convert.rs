//! One-shot conversion (EL WAV in -> enhanced WAV out) and system
//! evaluation over the parallel test split.

use super::{PipelineError, SystemLineage, VocoderMode};
use crate::alignment::{AlignmentModel, FeatureKind, SourceSeq};
use crate::corpus::{load_manifest, parse_transcript, Manifest, SpeechType, Split};
use crate::dsp::{griffin_lim, mel_spectrogram, DspParams, MelSpectrogram};
use crate::eval::{evaluate_pairs, EvalRow};
use crate::io::{read_wav, write_wav};
use crate::mat::Mat;
use crate::recognition::{DecodeMode, RecognizerModel};
use crate::synthesis::{interpolate_units, speaker_embedding_from_file, DiffusionDecoder, SpeakerEmbedding};
use crate::units::UnitCodebook;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvertMetadata {
    /// Wall time of each stage, in order.
    pub stage_seconds: Vec<(String, f64)>,
    /// duration(out) / duration(in).
    pub duration_ratio: f64,
    /// Whether decoding hit the frame cap.
    pub truncated: bool,
}

/// Models of one lineage loaded into memory; read-only and reusable across
/// conversions.
pub struct LoadedSystem {
    pub lineage: SystemLineage,
    pub recognizer: RecognizerModel,
    pub scorer: RecognizerModel,
    pub codebook: Option<UnitCodebook>,
    pub alignment: AlignmentModel,
    pub synthesis: Option<DiffusionDecoder>,
    pub speaker: Option<SpeakerEmbedding>,
    pub dsp: DspParams,
}

impl LoadedSystem {
    pub fn load(lineage: &SystemLineage) -> Result<Self, PipelineError> {
        lineage.verify()?;
        let recognizer = RecognizerModel::load(&lineage.recognition_ckpt)
            .map_err(|e| PipelineError::stage("load-recognition", e))?;
        let scorer = RecognizerModel::load(&lineage.scorer_ckpt)
            .map_err(|e| PipelineError::stage("load-scorer", e))?;
        let codebook = lineage
            .codebook_path
            .as_ref()
            .map(|p| UnitCodebook::load(p))
            .transpose()
            .map_err(|e| PipelineError::stage("load-units", e))?;
        let alignment = AlignmentModel::load(&lineage.alignment_ckpt)
            .map_err(|e| PipelineError::stage("load-alignment", e))?;
        let synthesis = lineage
            .synthesis_ckpt
            .as_ref()
            .map(|p| DiffusionDecoder::load(p))
            .transpose()
            .map_err(|e| PipelineError::stage("load-synthesis", e))?;
        let speaker = lineage
            .speaker_embedding_path
            .as_ref()
            .map(|p| speaker_embedding_from_file(p))
            .transpose()
            .map_err(|e| PipelineError::stage("load-speaker", e))?;
        Ok(LoadedSystem {
            lineage: lineage.clone(),
            recognizer,
            scorer,
            codebook,
            alignment,
            synthesis,
            speaker,
            dsp: DspParams::default(),
        })
    }

    /// Full conversion chain on raw samples. Deterministic given the seed.
    pub fn convert_waveform(&self, samples: &[f64], seed: u64) -> Result<(Vec<f64>, ConvertMetadata), PipelineError> {
        let mut stage_seconds = Vec::new();
        let clock = Instant::now;

        let t0 = clock();
        let mel = mel_spectrogram(samples, &self.dsp).map_err(|e| PipelineError::stage("analysis", e))?;
        stage_seconds.push(("analysis".to_string(), t0.elapsed().as_secs_f64()));

        let t0 = clock();
        let src = match self.lineage.input_kind {
            FeatureKind::Mel => mel.frames.clone(),
            FeatureKind::Bnf => self
                .recognizer
                .extract_bnf(&mel.frames)
                .map_err(|e| PipelineError::stage("recognition", e))?,
            FeatureKind::Units => return Err(PipelineError::Config("units cannot be inputs".into())),
        };
        stage_seconds.push(("recognition".to_string(), t0.elapsed().as_secs_f64()));

        let t0 = clock();
        let max_frames = self.alignment.config.max_frames_for(src.rows);
        let converted = self
            .alignment
            .convert(&SourceSeq::Frames(src), max_frames)
            .map_err(|e| PipelineError::stage("alignment", e))?;
        stage_seconds.push(("alignment".to_string(), t0.elapsed().as_secs_f64()));

        let t0 = clock();
        let out_mel: Mat = match self.lineage.output_kind {
            FeatureKind::Mel => converted.frames.clone(),
            FeatureKind::Units => {
                let decoder = self
                    .synthesis
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("unit outputs need a synthesis decoder".into()))?;
                let speaker = self
                    .speaker
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("unit outputs need a speaker embedding".into()))?;
                let units = interpolate_units(&converted.frames, converted.frames.rows)
                    .map_err(|e| PipelineError::stage("synthesis", e))?;
                decoder
                    .sample(&units, speaker, decoder.config.guidance_weight, seed)
                    .map_err(|e| PipelineError::stage("synthesis", e))?
            }
            FeatureKind::Bnf => return Err(PipelineError::Config("BNFs cannot be outputs".into())),
        };
        stage_seconds.push(("synthesis".to_string(), t0.elapsed().as_secs_f64()));

        let t0 = clock();
        let mel_struct = MelSpectrogram {
            frames: out_mel,
            frame_shift_ms: self.dsp.frame_shift as f64 * 1000.0 / self.dsp.sample_rate as f64,
            frame_length_ms: self.dsp.frame_length as f64 * 1000.0 / self.dsp.sample_rate as f64,
            n_mels: self.dsp.n_mels,
            sample_rate: self.dsp.sample_rate,
        };
        let out = match &self.lineage.vocoder {
            VocoderMode::GriffinLim { iterations } => griffin_lim(&mel_struct, *iterations)
                .map_err(|e| PipelineError::stage("vocoder", e))?,
            VocoderMode::External { exchange_dir } => {
                // Out-of-repo vocoder: dump the mel, read back the wav.
                let id = format!("mel_{seed:016x}");
                let mel_path = exchange_dir.join(format!("{id}.elvm"));
                crate::io::write_matrix(&mel_path, &mel_struct.frames, crate::io::Dtype::F64)
                    .map_err(|e| PipelineError::stage("vocoder", e))?;
                let wav_path = exchange_dir.join(format!("{id}.wav"));
                if !wav_path.exists() {
                    return Err(PipelineError::stage(
                        "vocoder",
                        format!("external vocoder output {} missing", wav_path.display()),
                    ));
                }
                read_wav(&wav_path).map_err(|e| PipelineError::stage("vocoder", e))?.0
            }
        };
        stage_seconds.push(("vocoder".to_string(), t0.elapsed().as_secs_f64()));

        let ratio = out.len() as f64 / samples.len() as f64;
        Ok((
            out,
            ConvertMetadata {
                stage_seconds,
                duration_ratio: ratio,
                truncated: converted.truncated,
            },
        ))
    }
}

/// Converts one WAV file end to end; output is mono 16 kHz PCM.
pub fn convert_file(
    lineage: &SystemLineage,
    in_wav: &Path,
    out_wav: &Path,
    seed: u64,
) -> Result<ConvertMetadata, PipelineError> {
    let system = LoadedSystem::load(lineage)?;
    let (samples, rate) = read_wav(in_wav).map_err(|e| PipelineError::stage("input", e))?;
    if rate != system.dsp.sample_rate {
        return Err(PipelineError::Config(format!(
            "input rate {rate} != {}",
            system.dsp.sample_rate
        )));
    }
    let (out, meta) = system.convert_waveform(&samples, seed)?;
    write_wav(out_wav, &out, system.dsp.sample_rate).map_err(|e| PipelineError::stage("output", e))?;
    Ok(meta)
}

/// Converts every EL test utterance (cached next to the lineage) and
/// computes the objective metrics against the parallel typical
/// references; CER uses the stage-1 typical recognizer.
pub fn evaluate_system(
    lineage: &SystemLineage,
    manifest_path: &Path,
    cache_dir: &Path,
    seed: u64,
) -> Result<(EvalRow, Vec<ConvertMetadata>), PipelineError> {
    let system = LoadedSystem::load(lineage)?;
    let manifest = load_manifest(manifest_path).map_err(|e| PipelineError::stage("evaluate", e))?;
    evaluate_loaded(&system, &manifest, cache_dir, seed)
}

/// Evaluation entry point over preloaded models (reused by the runner).
pub fn evaluate_loaded(
    system: &LoadedSystem,
    manifest: &Manifest,
    cache_dir: &Path,
    seed: u64,
) -> Result<(EvalRow, Vec<ConvertMetadata>), PipelineError> {
    std::fs::create_dir_all(cache_dir).map_err(super::io_err(cache_dir))?;
    let el_test: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.speech_type == SpeechType::El && e.split == Split::Test)
        .collect();
    if el_test.is_empty() {
        return Err(PipelineError::Config("no EL test utterances".into()));
    }
    let mut pairs = Vec::new();
    let mut metas = Vec::new();
    for entry in el_test {
        let reference = entry
            .parallel_id
            .as_ref()
            .and_then(|id| manifest.entry(id))
            .ok_or_else(|| PipelineError::Config(format!("{} has no parallel reference", entry.utterance_id)))?;
        let (el_wave, _) = read_wav(&manifest.wav_path(entry)).map_err(|e| PipelineError::stage("evaluate", e))?;
        let cached = cache_dir.join(format!("{}.wav", entry.utterance_id));
        let (converted, meta) = if cached.exists() {
            let (w, _) = read_wav(&cached).map_err(|e| PipelineError::stage("evaluate", e))?;
            (
                w,
                ConvertMetadata {
                    stage_seconds: Vec::new(),
                    duration_ratio: 0.0,
                    truncated: false,
                },
            )
        } else {
            let (w, meta) = system.convert_waveform(&el_wave, seed)?;
            write_wav(&cached, &w, system.dsp.sample_rate).map_err(|e| PipelineError::stage("evaluate", e))?;
            (w, meta)
        };
        let (ref_wave, _) =
            read_wav(&manifest.wav_path(reference)).map_err(|e| PipelineError::stage("evaluate", e))?;
        let transcript = parse_transcript(&reference.transcript)
            .ok_or_else(|| PipelineError::Config(format!("bad transcript {}", reference.utterance_id)))?;
        pairs.push((converted, ref_wave, transcript));
        metas.push(meta);
    }
    let scorer = &system.scorer;
    let dsp = system.dsp.clone();
    let row = evaluate_pairs(
        &system.lineage.system_id,
        &format!("{:?}", system.lineage.input_kind).to_lowercase(),
        &format!("{:?}", system.lineage.output_kind).to_lowercase(),
        &system.lineage.pretraining,
        &pairs,
        |wave| {
            let mel = match mel_spectrogram(wave, &dsp) {
                Ok(m) => m,
                Err(_) => return Vec::new(),
            };
            scorer.decode(&mel.frames, DecodeMode::Greedy).unwrap_or_default()
        },
        &system.dsp,
    )
    .map_err(|e| PipelineError::stage("evaluate", e))?;
    Ok((row, metas))
}
