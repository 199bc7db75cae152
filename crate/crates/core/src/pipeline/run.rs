//! Experiment configuration and the cached stage runner.

use super::data::{alignment_pairs_for, synth_items_for, AlignmentDataKind};
use super::{io_err, stage_hash, stage_meta_path, PipelineError, StageMeta, SystemLineage, VocoderMode};
use crate::alignment::{
    finetune_schedule, pretrain, AlignRecipe, AlignStage, AlignmentConfig, AlignmentModel, FeatureKind,
};
use crate::corpus::{build_corpus, load_manifest, CorpusConfig, Manifest, SpeechType, Split};
use crate::dsp::DspParams;
use crate::recognition::{
    dataset_from_entries, train_stage, LossMode, RecItem, RecognitionRecipe, RecognizerConfig,
    RecognizerModel,
};
use crate::synthesis::{
    adapt_fewshot, pretrain_multispeaker, DiffusionConfig, DiffusionDecoder, SynthRecipe,
};
use crate::units::{fit_unit_extractor, UnitCodebook};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Epochs / learning rate / batch size of one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// L2 pull toward the stage-entry parameters (recognition stages).
    #[serde(default)]
    pub anchor_weight: f64,
    /// SGD momentum for the stage; None selects Adam.
    #[serde(default)]
    pub sgd_momentum: Option<f64>,
}

impl TrainBudget {
    pub fn new(epochs: usize, lr: f64, batch_size: usize) -> Self {
        TrainBudget {
            epochs,
            lr,
            batch_size,
            anchor_weight: 0.0,
            sgd_momentum: None,
        }
    }

    pub fn with_anchor(mut self, anchor_weight: f64) -> Self {
        self.anchor_weight = anchor_weight;
        self
    }

    pub fn with_sgd(mut self, momentum: f64) -> Self {
        self.sgd_momentum = Some(momentum);
        self
    }
}

/// Alignment pretraining method of a system configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMethod {
    ParallelVc,
    TtsAe,
}

impl PretrainMethod {
    pub fn label(&self) -> &'static str {
        match self {
            PretrainMethod::ParallelVc => "parallel_vc",
            PretrainMethod::TtsAe => "tts_ae",
        }
    }
}

/// One system variant: input/output features plus pretraining method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub id: String,
    pub inputs: FeatureKind,
    pub outputs: FeatureKind,
    pub pretraining: PretrainMethod,
}

/// Width settings of the alignment network (layer counts are fixed at six
/// by the architecture default but configurable here too).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentSize {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for AlignmentSize {
    fn default() -> Self {
        AlignmentSize {
            d_model: 48,
            heads: 4,
            d_ff: 192,
            encoder_blocks: 6,
            decoder_blocks: 6,
        }
    }
}

/// The one tree-structured config: per-stage sections and a global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dsp: DspParams,
    pub recognizer: RecognizerConfig,
    pub rec_stage1: TrainBudget,
    pub rec_stage2: TrainBudget,
    pub rec_stage3: TrainBudget,
    pub units_k: usize,
    pub alignment_size: AlignmentSize,
    pub align_pretrain: TrainBudget,
    pub align_ft_synel: TrainBudget,
    pub align_ft_target: TrainBudget,
    pub synthesis: DiffusionConfig,
    pub synth_pretrain: TrainBudget,
    pub synth_adapt: TrainBudget,
    pub vocoder: VocoderMode,
    pub systems: Vec<SystemConfig>,
}

impl ExperimentConfig {
    /// Desk-scale defaults covering the five system comparison variants.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            seed: 42,
            corpus: CorpusConfig::default(),
            dsp: DspParams::default(),
            recognizer: RecognizerConfig::default(),
            rec_stage1: TrainBudget::new(8, 2e-3, 8),
            rec_stage2: TrainBudget::new(8, 3e-4, 8).with_anchor(0.03),
            rec_stage3: TrainBudget::new(4, 2e-4, 8).with_anchor(0.03),
            units_k: 64,
            alignment_size: AlignmentSize::default(),
            align_pretrain: TrainBudget::new(10, 1.5e-3, 8),
            align_ft_synel: TrainBudget::new(6, 1e-3, 8),
            align_ft_target: TrainBudget::new(10, 1e-3, 8),
            synthesis: DiffusionConfig::default(),
            synth_pretrain: TrainBudget::new(6, 2e-3, 8),
            synth_adapt: TrainBudget::new(6, 1e-3, 8),
            vocoder: VocoderMode::default(),
            systems: vec![
                SystemConfig {
                    id: "sys1".into(),
                    inputs: FeatureKind::Mel,
                    outputs: FeatureKind::Mel,
                    pretraining: PretrainMethod::TtsAe,
                },
                SystemConfig {
                    id: "sys2".into(),
                    inputs: FeatureKind::Mel,
                    outputs: FeatureKind::Mel,
                    pretraining: PretrainMethod::ParallelVc,
                },
                SystemConfig {
                    id: "sys3".into(),
                    inputs: FeatureKind::Bnf,
                    outputs: FeatureKind::Units,
                    pretraining: PretrainMethod::TtsAe,
                },
                SystemConfig {
                    id: "sys4".into(),
                    inputs: FeatureKind::Bnf,
                    outputs: FeatureKind::Units,
                    pretraining: PretrainMethod::ParallelVc,
                },
                SystemConfig {
                    id: "sys5".into(),
                    inputs: FeatureKind::Bnf,
                    outputs: FeatureKind::Mel,
                    pretraining: PretrainMethod::ParallelVc,
                },
            ],
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.systems.is_empty() {
            return Err(PipelineError::Config("no systems configured".into()));
        }
        for sys in &self.systems {
            if sys.inputs == FeatureKind::Units {
                return Err(PipelineError::Config(format!("{}: units cannot be inputs", sys.id)));
            }
            if sys.outputs == FeatureKind::Bnf {
                return Err(PipelineError::Config(format!("{}: BNFs cannot be outputs", sys.id)));
            }
        }
        if self.recognizer.n_mels != self.dsp.n_mels {
            return Err(PipelineError::Config("recognizer n_mels != dsp n_mels".into()));
        }
        if self.synthesis.n_mels != self.dsp.n_mels {
            return Err(PipelineError::Config("synthesis n_mels != dsp n_mels".into()));
        }
        if self.synthesis.unit_dim != self.units_k {
            return Err(PipelineError::Config("synthesis unit_dim != units_k".into()));
        }
        Ok(())
    }
}

/// Whether a stage was built this run or found in the store.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Built { elapsed_s: f64 },
    Cached,
}

/// Runs or loads one cached stage. The directory name carries the hash;
/// a directory whose sidecar disagrees with the expected hash is stale.
fn run_stage(
    store_dir: &Path,
    name: &str,
    hash: &str,
    outcomes: &mut Vec<(String, StageOutcome)>,
    build: impl FnOnce(&Path) -> Result<(), PipelineError>,
) -> Result<PathBuf, PipelineError> {
    let dir = store_dir.join(format!("{name}-{hash}"));
    let meta_path = stage_meta_path(&dir);
    if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: StageMeta =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if meta.hash != hash {
            return Err(PipelineError::StaleArtifact {
                path: dir.display().to_string(),
                recorded: meta.hash,
                expected: hash.to_string(),
            });
        }
        outcomes.push((name.to_string(), StageOutcome::Cached));
        return Ok(dir);
    }
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let start = Instant::now();
    build(&dir).map_err(|e| match e {
        PipelineError::Stage { .. } => e,
        other => PipelineError::stage(name, other),
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    let meta = StageMeta {
        stage: name.to_string(),
        hash: hash.to_string(),
        elapsed_s: elapsed,
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap()).map_err(io_err(&meta_path))?;
    outcomes.push((name.to_string(), StageOutcome::Built { elapsed_s: elapsed }));
    Ok(dir)
}

fn rec_items(
    manifest: &Manifest,
    dsp: &DspParams,
    pred: impl Fn(&crate::corpus::ManifestEntry) -> bool,
) -> Result<Vec<RecItem>, PipelineError> {
    let entries = manifest.select(pred);
    dataset_from_entries(manifest, &entries, dsp).map_err(|e| PipelineError::stage("features", e))
}

struct RecognitionData {
    stage1_train: Vec<RecItem>,
    stage2_train: Vec<RecItem>,
    stage3_train: Vec<RecItem>,
    dev: Vec<RecItem>,
}

fn recognition_data(manifest: &Manifest, dsp: &DspParams) -> Result<RecognitionData, PipelineError> {
    let stage1_train = rec_items(manifest, dsp, |e| {
        e.speech_type == SpeechType::Typical && e.split == Split::Train
    })?;
    let stage2_train = rec_items(manifest, dsp, |e| {
        e.split == Split::Train
            && (e.utterance_id.starts_with("synel_el_")
                || e.utterance_id.starts_with("tgt_typ_")
                || e.utterance_id.starts_with("pool_"))
    })?;
    let stage3_train = rec_items(manifest, dsp, |e| {
        e.utterance_id.starts_with("tgt_el_") && e.split == Split::Train
    })?;
    let dev = rec_items(manifest, dsp, |e| {
        e.split == Split::Dev && e.utterance_id.starts_with("tgt_")
    })?;
    Ok(RecognitionData {
        stage1_train,
        stage2_train,
        stage3_train,
        dev,
    })
}

fn recipe_from(budget: &TrainBudget, mode: LossMode, seed: u64) -> RecognitionRecipe {
    RecognitionRecipe {
        batch_size: budget.batch_size,
        anchor_weight: budget.anchor_weight,
        optimizer: match budget.sgd_momentum {
            Some(momentum) => crate::recognition::StageOptimizer::Sgd { momentum },
            None => crate::recognition::StageOptimizer::Adam,
        },
        ..RecognitionRecipe::new(mode, budget.epochs, budget.lr, seed)
    }
}

/// Stage-2 ablation variants mirroring the recognition comparison rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecognitionVariant {
    /// Intermediate stage with SID loss and typical masking (proposed).
    SidMasked,
    /// SID loss but no masking.
    SidOnly,
    /// Plain joint CTC/attention fine-tune on both types, no SID.
    PlainJoint,
    /// No intermediate stage: EL-only fine-tuning from stage 1.
    ElOnly,
}

impl RecognitionVariant {
    pub fn label(&self) -> &'static str {
        match self {
            RecognitionVariant::SidMasked => "sid_masked",
            RecognitionVariant::SidOnly => "sid_only",
            RecognitionVariant::PlainJoint => "plain_joint",
            RecognitionVariant::ElOnly => "el_only",
        }
    }
}

/// Shared handle over the experiment store for composite runs.
pub struct ExperimentRunner<'a> {
    pub config: &'a ExperimentConfig,
    pub work_dir: PathBuf,
    store_dir: PathBuf,
    pub outcomes: Vec<(String, StageOutcome)>,
}

impl<'a> ExperimentRunner<'a> {
    pub fn new(config: &'a ExperimentConfig, work_dir: &Path) -> Result<Self, PipelineError> {
        config.validate()?;
        let work_dir = match std::env::var(super::CKPT_ROOT_ENV) {
            Ok(root) if !root.is_empty() => PathBuf::from(root),
            _ => work_dir.to_path_buf(),
        };
        let store_dir = work_dir.join("store");
        std::fs::create_dir_all(&store_dir).map_err(io_err(&store_dir))?;
        Ok(ExperimentRunner {
            config,
            work_dir,
            store_dir,
            outcomes: Vec::new(),
        })
    }

    pub fn corpus(&mut self) -> Result<(Manifest, String), PipelineError> {
        let hash = stage_hash("corpus", &self.config.corpus, &[]);
        let config = &self.config.corpus;
        let dir = run_stage(&self.store_dir, "corpus", &hash, &mut self.outcomes, |dir| {
            build_corpus(config, dir).map_err(|e| PipelineError::stage("corpus", e))?;
            Ok(())
        })?;
        let manifest =
            load_manifest(&dir.join("manifest.jsonl")).map_err(|e| PipelineError::stage("corpus", e))?;
        Ok((manifest, hash))
    }

    /// Recognition stages 1..3 (proposed variant), returning the stage-1
    /// scorer path, the stage-3 extractor path, and the stage-3 hash.
    pub fn recognition(
        &mut self,
        manifest: &Manifest,
        corpus_hash: &str,
    ) -> Result<(PathBuf, PathBuf, String), PipelineError> {
        let data = recognition_data(manifest, &self.config.dsp)?;
        let stage1 = self.recognition_stage1(&data, corpus_hash)?;
        let (stage3, hash) = self.recognition_rest(&data, &stage1.0, &stage1.1, RecognitionVariant::SidMasked)?;
        Ok((stage1.0.join("model.ckpt"), stage3, hash))
    }

    fn recognition_stage1(
        &mut self,
        data: &RecognitionData,
        corpus_hash: &str,
    ) -> Result<(PathBuf, String), PipelineError> {
        let hash = stage_hash(
            "rec1",
            &(&self.config.recognizer, &self.config.rec_stage1, self.config.seed),
            &[corpus_hash],
        );
        let config = self.config;
        let dir = run_stage(&self.store_dir, "rec1", &hash, &mut self.outcomes, |dir| {
            let mut model = RecognizerModel::new(config.recognizer.clone(), config.seed);
            let recipe = recipe_from(&config.rec_stage1, LossMode::Standard, config.seed);
            let log = train_stage(&mut model, &recipe, &data.stage1_train, &data.dev)
                .map_err(|e| PipelineError::stage("rec1", e))?;
            model
                .save(&dir.join("model.ckpt"), serde_json::json!({"stage": 1, "log": log}))
                .map_err(|e| PipelineError::stage("rec1", e))?;
            Ok(())
        })?;
        Ok((dir, hash))
    }

    fn recognition_rest(
        &mut self,
        data: &RecognitionData,
        stage1_dir: &Path,
        stage1_hash: &str,
        variant: RecognitionVariant,
    ) -> Result<(PathBuf, String), PipelineError> {
        let config = self.config;
        let (stage2_dir, stage2_hash) = if variant == RecognitionVariant::ElOnly {
            (stage1_dir.to_path_buf(), stage1_hash.to_string())
        } else {
            let mode = match variant {
                RecognitionVariant::SidMasked => LossMode::Intermediate,
                RecognitionVariant::SidOnly => LossMode::IntermediateNoMask,
                RecognitionVariant::PlainJoint => LossMode::Standard,
                RecognitionVariant::ElOnly => unreachable!(),
            };
            let name = format!("rec2_{}", variant.label());
            let hash = stage_hash(&name, &(&config.rec_stage2, format!("{mode:?}")), &[stage1_hash]);
            let stage1_ckpt = stage1_dir.join("model.ckpt");
            let dir = run_stage(&self.store_dir, &name, &hash, &mut self.outcomes, |dir| {
                let mut model =
                    RecognizerModel::load(&stage1_ckpt).map_err(|e| PipelineError::stage(&name, e))?;
                let recipe = recipe_from(&config.rec_stage2, mode, config.seed + 1);
                let log = train_stage(&mut model, &recipe, &data.stage2_train, &data.dev)
                    .map_err(|e| PipelineError::stage(&name, e))?;
                model
                    .save(&dir.join("model.ckpt"), serde_json::json!({"stage": 2, "variant": variant.label(), "log": log}))
                    .map_err(|e| PipelineError::stage(&name, e))?;
                Ok(())
            })?;
            (dir, hash)
        };
        let name = format!("rec3_{}", variant.label());
        let hash = stage_hash(&name, &config.rec_stage3, &[&stage2_hash]);
        let stage2_ckpt = stage2_dir.join("model.ckpt");
        let dir = run_stage(&self.store_dir, &name, &hash, &mut self.outcomes, |dir| {
            let mut model = RecognizerModel::load(&stage2_ckpt).map_err(|e| PipelineError::stage(&name, e))?;
            let recipe = recipe_from(&config.rec_stage3, LossMode::Standard, config.seed + 2);
            let log = train_stage(&mut model, &recipe, &data.stage3_train, &data.dev)
                .map_err(|e| PipelineError::stage(&name, e))?;
            model
                .save(&dir.join("model.ckpt"), serde_json::json!({"stage": 3, "variant": variant.label(), "log": log}))
                .map_err(|e| PipelineError::stage(&name, e))?;
            Ok(())
        })?;
        Ok((dir.join("model.ckpt"), hash))
    }

    pub fn units(&mut self, manifest: &Manifest, corpus_hash: &str) -> Result<(PathBuf, String), PipelineError> {
        let hash = stage_hash("units", &(self.config.units_k, self.config.seed), &[corpus_hash]);
        let config = self.config;
        let dir = run_stage(&self.store_dir, "units", &hash, &mut self.outcomes, |dir| {
            let codebook = fit_unit_extractor(manifest, config.units_k, config.seed, &config.dsp)
                .map_err(|e| PipelineError::stage("units", e))?;
            codebook
                .save(&dir.join("codebook.json"))
                .map_err(|e| PipelineError::stage("units", e))?;
            Ok(())
        })?;
        Ok((dir.join("codebook.json"), hash))
    }

    /// Alignment chain for one system: pretraining then the two-step
    /// fine-tuning schedule, checkpointed separately for branching.
    #[allow(clippy::too_many_arguments)]
    pub fn alignment_for_system(
        &mut self,
        manifest: &Manifest,
        sys: &SystemConfig,
        recognizer: Option<&RecognizerModel>,
        codebook: Option<&UnitCodebook>,
        parent_hashes: &[&str],
        seed_offset: u64,
    ) -> Result<(PathBuf, String), PipelineError> {
        let config = self.config;
        let input_dim = match sys.inputs {
            FeatureKind::Mel => config.dsp.n_mels,
            FeatureKind::Bnf => config.recognizer.bnf_dim,
            FeatureKind::Units => unreachable!("validated"),
        };
        let output_dim = match sys.outputs {
            FeatureKind::Mel => config.dsp.n_mels,
            FeatureKind::Units => config.units_k,
            FeatureKind::Bnf => unreachable!("validated"),
        };
        let subsample = match sys.inputs {
            FeatureKind::Bnf => config.recognizer.subsample,
            _ => 1,
        };
        let size = &config.alignment_size;
        let align_config = AlignmentConfig {
            d_model: size.d_model,
            heads: size.heads,
            d_ff: size.d_ff,
            encoder_blocks: size.encoder_blocks,
            decoder_blocks: size.decoder_blocks,
            ..AlignmentConfig::desk_default(sys.inputs, sys.outputs, input_dim, output_dim, subsample)
        };
        let seed = config.seed + 10 + seed_offset;
        let name = format!("align_{}", sys.id);
        let hash = stage_hash(
            &name,
            &(
                &align_config,
                sys,
                &config.align_pretrain,
                &config.align_ft_synel,
                &config.align_ft_target,
                seed,
            ),
            parent_hashes,
        );
        let dir = run_stage(&self.store_dir, &name, &hash, &mut self.outcomes, |dir| {
            let mut model = AlignmentModel::new(align_config.clone(), seed);
            let mut all_logs = Vec::new();
            match sys.pretraining {
                PretrainMethod::ParallelVc => {
                    let pairs = alignment_pairs_for(
                        manifest,
                        AlignmentDataKind::ParallelVc,
                        sys.inputs,
                        sys.outputs,
                        recognizer,
                        codebook,
                        &config.dsp,
                    )?;
                    let recipe = AlignRecipe {
                        batch_size: config.align_pretrain.batch_size,
                        ..AlignRecipe::new(AlignStage::PretrainParallelVc, config.align_pretrain.epochs, config.align_pretrain.lr, seed)
                    };
                    all_logs.push(
                        pretrain(&mut model, &recipe, &pairs, &[])
                            .map_err(|e| PipelineError::stage(&name, e))?,
                    );
                }
                PretrainMethod::TtsAe => {
                    let tts_pairs = alignment_pairs_for(
                        manifest,
                        AlignmentDataKind::TtsToTarget,
                        sys.inputs,
                        sys.outputs,
                        recognizer,
                        codebook,
                        &config.dsp,
                    )?;
                    let recipe = AlignRecipe {
                        batch_size: config.align_pretrain.batch_size,
                        ..AlignRecipe::new(AlignStage::PretrainTts, config.align_pretrain.epochs, config.align_pretrain.lr, seed)
                    };
                    all_logs.push(
                        pretrain(&mut model, &recipe, &tts_pairs, &[])
                            .map_err(|e| PipelineError::stage(&name, e))?,
                    );
                    let ae_pairs = alignment_pairs_for(
                        manifest,
                        AlignmentDataKind::TargetAutoencode,
                        sys.inputs,
                        sys.outputs,
                        recognizer,
                        codebook,
                        &config.dsp,
                    )?;
                    // Decoder frozen in the AE phase, which gets half the
                    // pretraining epochs after a full TTS phase.
                    let ae_epochs = config.align_pretrain.epochs.div_ceil(2);
                    let recipe = AlignRecipe {
                        batch_size: config.align_pretrain.batch_size,
                        ..AlignRecipe::new(AlignStage::PretrainAe, ae_epochs, config.align_pretrain.lr, seed + 1)
                    };
                    all_logs.push(
                        pretrain(&mut model, &recipe, &ae_pairs, &[])
                            .map_err(|e| PipelineError::stage(&name, e))?,
                    );
                }
            }
            model.save(&dir.join("pretrained.ckpt")).map_err(|e| PipelineError::stage(&name, e))?;
            let synel = alignment_pairs_for(
                manifest,
                AlignmentDataKind::SyntheticEl,
                sys.inputs,
                sys.outputs,
                recognizer,
                codebook,
                &config.dsp,
            )?;
            let target = alignment_pairs_for(
                manifest,
                AlignmentDataKind::TargetEl(Split::Train),
                sys.inputs,
                sys.outputs,
                recognizer,
                codebook,
                &config.dsp,
            )?;
            let dev = alignment_pairs_for(
                manifest,
                AlignmentDataKind::TargetEl(Split::Dev),
                sys.inputs,
                sys.outputs,
                recognizer,
                codebook,
                &config.dsp,
            )?;
            let stages = vec![
                (
                    AlignRecipe {
                        batch_size: config.align_ft_synel.batch_size,
                        checkpoint_dir: None,
                        ..AlignRecipe::new(AlignStage::FtSyntheticEl, config.align_ft_synel.epochs, config.align_ft_synel.lr, seed + 2)
                    },
                    synel,
                    dev.clone(),
                ),
                (
                    AlignRecipe {
                        batch_size: config.align_ft_target.batch_size,
                        ..AlignRecipe::new(AlignStage::FtTargetEl, config.align_ft_target.epochs, config.align_ft_target.lr, seed + 3)
                    },
                    target,
                    dev,
                ),
            ];
            let logs = finetune_schedule(&mut model, &stages).map_err(|e| PipelineError::stage(&name, e))?;
            all_logs.extend(logs);
            std::fs::write(
                dir.join("train_log.json"),
                serde_json::to_string_pretty(&all_logs).unwrap(),
            )
            .map_err(io_err(dir))?;
            model.save(&dir.join("model.ckpt")).map_err(|e| PipelineError::stage(&name, e))?;
            Ok(())
        })?;
        Ok((dir.join("model.ckpt"), hash))
    }

    /// Diffusion decoder: multi-speaker pretraining then few-shot target
    /// adaptation; also saves the fixed target speaker embedding.
    pub fn synthesis(
        &mut self,
        manifest: &Manifest,
        codebook: &UnitCodebook,
        parent_hashes: &[&str],
    ) -> Result<(PathBuf, PathBuf, String), PipelineError> {
        let config = self.config;
        let hash = stage_hash(
            "synth",
            &(&config.synthesis, &config.synth_pretrain, &config.synth_adapt, config.seed),
            parent_hashes,
        );
        let dir = run_stage(&self.store_dir, "synth", &hash, &mut self.outcomes, |dir| {
            let pool = manifest.select(|e| e.utterance_id.starts_with("pool_"));
            let pretrain_items = synth_items_for(manifest, &pool, codebook, config.synthesis.spk_dim, &config.dsp)?;
            let mut decoder = DiffusionDecoder::new(config.synthesis.clone(), config.seed);
            let recipe = SynthRecipe {
                batch_size: config.synth_pretrain.batch_size,
                ..SynthRecipe::new(config.synth_pretrain.epochs, config.synth_pretrain.lr, config.seed + 20)
            };
            pretrain_multispeaker(&mut decoder, &pretrain_items, &recipe)
                .map_err(|e| PipelineError::stage("synth", e))?;
            decoder.save(&dir.join("pretrained.ckpt")).map_err(|e| PipelineError::stage("synth", e))?;

            let target = manifest.select(|e| {
                e.utterance_id.starts_with("tgt_typ_") && e.split == Split::Train
            });
            let adapt_items = synth_items_for(manifest, &target, codebook, config.synthesis.spk_dim, &config.dsp)?;
            let recipe = SynthRecipe {
                batch_size: config.synth_adapt.batch_size,
                ..SynthRecipe::new(config.synth_adapt.epochs, config.synth_adapt.lr, config.seed + 21)
            };
            adapt_fewshot(&mut decoder, &adapt_items, &recipe)
                .map_err(|e| PipelineError::stage("synth", e))?;
            decoder.save(&dir.join("model.ckpt")).map_err(|e| PipelineError::stage("synth", e))?;
            // Fixed target embedding, shared by every sampled utterance.
            if let Some(item) = adapt_items.first() {
                crate::io::write_matrix(
                    &dir.join("speaker.elvm"),
                    &crate::mat::Mat::row_vector(&item.spk.vector),
                    crate::io::Dtype::F64,
                )
                .map_err(|e| PipelineError::stage("synth", e))?;
            }
            Ok(())
        })?;
        Ok((dir.join("model.ckpt"), dir.join("speaker.elvm"), hash))
    }
}

/// Trains a recognition ablation variant (reusing cached stages) and
/// returns the final checkpoint path.
pub fn recognition_variant(
    config: &ExperimentConfig,
    work_dir: &Path,
    variant: RecognitionVariant,
) -> Result<PathBuf, PipelineError> {
    let mut runner = ExperimentRunner::new(config, work_dir)?;
    let (manifest, corpus_hash) = runner.corpus()?;
    let data = recognition_data(&manifest, &config.dsp)?;
    let stage1 = runner.recognition_stage1(&data, &corpus_hash)?;
    let (ckpt, _) = runner.recognition_rest(&data, &stage1.0, &stage1.1, variant)?;
    Ok(ckpt)
}

/// Executes corpus build, recognition stages 1-3, unit fitting, alignment
/// pretrain + fine-tuning for every configured system, and synthesis
/// pretrain + adaptation, all cached and resumable. Returns one lineage
/// per system plus the stage outcomes of this invocation.
pub fn run_experiment(
    config: &ExperimentConfig,
    work_dir: &Path,
) -> Result<(Vec<SystemLineage>, Vec<(String, StageOutcome)>), PipelineError> {
    let mut runner = ExperimentRunner::new(config, work_dir)?;
    let (manifest, corpus_hash) = runner.corpus()?;
    let (scorer_ckpt, recognition_ckpt, rec_hash) = runner.recognition(&manifest, &corpus_hash)?;
    let (codebook_path, units_hash) = runner.units(&manifest, &corpus_hash)?;
    let recognizer =
        RecognizerModel::load(&recognition_ckpt).map_err(|e| PipelineError::stage("recognition", e))?;
    let codebook = UnitCodebook::load(&codebook_path).map_err(|e| PipelineError::stage("units", e))?;

    let needs_synthesis = config.systems.iter().any(|s| s.outputs == FeatureKind::Units);
    let synth = if needs_synthesis {
        let (model, spk, hash) = runner.synthesis(&manifest, &codebook, &[&corpus_hash, &units_hash])?;
        Some((model, spk, hash))
    } else {
        None
    };

    let mut lineages = Vec::new();
    for sys in &config.systems {
        let rec_parent: Vec<&str> = match sys.inputs {
            FeatureKind::Bnf => vec![corpus_hash.as_str(), rec_hash.as_str(), units_hash.as_str()],
            _ => vec![corpus_hash.as_str(), units_hash.as_str()],
        };
        let (alignment_ckpt, align_hash) = runner.alignment_for_system(
            &manifest,
            sys,
            Some(&recognizer),
            Some(&codebook),
            &rec_parent,
            0,
        )?;
        let mut artifact_hashes = vec![
            (recognition_ckpt.clone(), rec_hash.clone()),
            (alignment_ckpt.clone(), align_hash.clone()),
        ];
        let (synthesis_ckpt, spk_path) = if sys.outputs == FeatureKind::Units {
            let (model, spk, hash) = synth.clone().expect("synthesis trained");
            artifact_hashes.push((model.clone(), hash));
            (Some(model), Some(spk))
        } else {
            (None, None)
        };
        let lineage = SystemLineage {
            system_id: sys.id.clone(),
            input_kind: sys.inputs,
            output_kind: sys.outputs,
            pretraining: sys.pretraining.label().to_string(),
            recognition_ckpt: recognition_ckpt.clone(),
            scorer_ckpt: scorer_ckpt.clone(),
            codebook_path: Some(codebook_path.clone()),
            alignment_ckpt,
            synthesis_ckpt,
            speaker_embedding_path: spk_path,
            corpus_dir: manifest.root.clone(),
            vocoder: config.vocoder.clone(),
            artifact_hashes,
            config_hash: stage_hash("system", &sys, &[&corpus_hash, &rec_hash, &units_hash, &align_hash]),
        };
        lineage.save(&runner.work_dir.join("systems").join(format!("{}.json", sys.id)))?;
        lineages.push(lineage);
    }
    Ok((lineages, runner.outcomes))
}
