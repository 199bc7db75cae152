//! End-to-end orchestration: one tree-structured experiment config, stage
//! sequencing across every module, content-addressed artifact caching,
//! checkpoint lineage, and the one-shot convert command.
//!
//! Every stage writes into `work_dir/store/<stage>-<hash>/` where the hash
//! covers the stage's own config plus its parents' hashes; rerunning with
//! an unchanged config finds the directory and skips the work, while any
//! upstream config change reruns exactly the affected suffix of the
//! pipeline.

mod convert;
mod data;
mod run;

pub use convert::{convert_file, evaluate_system, ConvertMetadata};
pub use data::{alignment_pairs_for, synth_items_for, AlignmentDataKind};
pub use run::{
    recognition_variant, run_experiment, ExperimentConfig, PretrainMethod, RecognitionVariant,
    StageOutcome, SystemConfig, TrainBudget,
};

use crate::alignment::FeatureKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable overriding the checkpoint/artifact root.
pub const CKPT_ROOT_ENV: &str = "ELVC_CKPT_ROOT";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("stale artifact {path}: recorded hash {recorded} != expected {expected}")]
    StaleArtifact {
        path: String,
        recorded: String,
        expected: String,
    },
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }

    /// CLI exit code: 2 for config errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How converted mels become waveforms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum VocoderMode {
    /// Iterative phase reconstruction (default, self-contained).
    GriffinLim { iterations: usize },
    /// Out-of-repo neural vocoder: mel dumps are written to the exchange
    /// directory and `<id>.wav` files are read back.
    External { exchange_dir: PathBuf },
}

impl Default for VocoderMode {
    fn default() -> Self {
        VocoderMode::GriffinLim { iterations: 40 }
    }
}

/// Everything needed to run conversion and evaluation for one system:
/// artifact paths plus the hashes they were built under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemLineage {
    pub system_id: String,
    pub input_kind: FeatureKind,
    pub output_kind: FeatureKind,
    pub pretraining: String,
    /// Stage-3 recognizer (BNF extractor).
    pub recognition_ckpt: PathBuf,
    /// Stage-1 typical recognizer (CER scoring convention).
    pub scorer_ckpt: PathBuf,
    pub codebook_path: Option<PathBuf>,
    pub alignment_ckpt: PathBuf,
    pub synthesis_ckpt: Option<PathBuf>,
    /// Fixed target-speaker embedding used for every sampled utterance.
    pub speaker_embedding_path: Option<PathBuf>,
    pub corpus_dir: PathBuf,
    pub vocoder: VocoderMode,
    /// Artifact path -> stage hash recorded when the lineage was built.
    pub artifact_hashes: Vec<(PathBuf, String)>,
    pub config_hash: String,
}

impl SystemLineage {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Config-hash verification: every referenced artifact must still carry
    /// the stage hash recorded at build time.
    pub fn verify(&self) -> Result<(), PipelineError> {
        for (artifact, expected) in &self.artifact_hashes {
            let recorded = read_stage_hash(artifact)?;
            if &recorded != expected {
                return Err(PipelineError::StaleArtifact {
                    path: artifact.display().to_string(),
                    recorded,
                    expected: expected.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Stage metadata sidecar: `<stage_dir>/stage.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub hash: String,
    pub elapsed_s: f64,
}

pub(crate) fn stage_meta_path(stage_dir: &Path) -> PathBuf {
    stage_dir.join("stage.json")
}

/// Reads the stage hash covering an artifact (its directory's sidecar).
pub fn read_stage_hash(artifact: &Path) -> Result<String, PipelineError> {
    let dir = if artifact.is_dir() {
        artifact.to_path_buf()
    } else {
        artifact
            .parent()
            .map(|p| p.to_path_buf())
            .ok_or_else(|| PipelineError::Config(format!("no parent for {}", artifact.display())))?
    };
    let meta_path = stage_meta_path(&dir);
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: StageMeta = serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(meta.hash)
}

/// Short content hash of a serializable config plus parent hashes.
pub(crate) fn stage_hash(name: &str, config: &impl Serialize, parents: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    for p in parents {
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
