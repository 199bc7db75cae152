//! Synthetic paired typical / pseudo-EL corpus.
//!
//! The builder lays out every utterance group the training stages need:
//!
//! * `tgt_typ_*` / `tgt_el_*` — the parallel target data (116/40/40 split
//!   by default), typical target speaker vs pseudo-EL speaker;
//! * `pool_*` — multi-speaker typical utterances, train split, for
//!   large-scale pretraining stands-ins;
//! * `vc_src_*` / `vc_tgt_*` — a parallel two-speaker typical corpus for
//!   parallel-VC pretraining of the alignment module;
//! * `synel_typ_*` / `synel_el_*` — synthetic-EL pairs with a heavier
//!   corruption rate, used by the intermediate fine-tuning stages.
//!
//! Manifests are JSON lines, one entry per utterance, with file paths
//! relative to the manifest location.

pub mod phones;
mod synth;

pub use phones::{parse_transcript, transcript_to_string, PhoneId};
pub use synth::{f0_contour, generate_typical, simulate_el, ElSimulationParams, SpeakerSpec, SAMPLE_RATE};

use crate::io::{read_wav, write_wav, IoError};
use crate::rng::Prng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown symbol {0:?}")]
    InvalidSymbol(char),
    #[error("empty input text")]
    EmptyInput,
    #[error("source utterance is not typical speech")]
    InvalidSpeechType,
    #[error("config error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("manifest parse error at line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },
    #[error("manifest invariant violated: {0}")]
    InvalidManifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeechType {
    #[serde(rename = "TYPICAL")]
    Typical,
    #[serde(rename = "EL")]
    El,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One corpus utterance held in memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub waveform: Vec<f64>,
    pub transcript: Vec<PhoneId>,
    pub speech_type: SpeechType,
    pub speaker_id: String,
    /// For EL utterances: id of the typical source utterance.
    pub source_id: Option<String>,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.waveform.len() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub file_path: String,
    pub transcript: String,
    pub speech_type: SpeechType,
    pub speaker_id: String,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallel_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the manifest was loaded from / written to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| IoError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| IoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| CorpusError::ConfigError(format!("serialize entry: {e}")))?;
            writeln!(file, "{line}").map_err(|e| IoError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }

    pub fn wav_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.file_path)
    }

    /// Reads the entry's waveform and reconstructs an in-memory utterance.
    pub fn load_utterance(&self, entry: &ManifestEntry) -> Result<Utterance, CorpusError> {
        let (waveform, _) = read_wav(&self.wav_path(entry))?;
        let transcript = parse_transcript(&entry.transcript)
            .ok_or_else(|| CorpusError::InvalidManifest(format!("bad transcript in {}", entry.utterance_id)))?;
        Ok(Utterance {
            id: entry.utterance_id.clone(),
            waveform,
            transcript,
            speech_type: entry.speech_type,
            speaker_id: entry.speaker_id.clone(),
            source_id: entry.parallel_id.clone(),
        })
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == id)
    }

    pub fn select<'a>(&'a self, pred: impl Fn(&ManifestEntry) -> bool + 'a) -> Vec<&'a ManifestEntry> {
        self.entries.iter().filter(|e| pred(e)).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| IoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| CorpusError::ManifestParse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(Manifest {
        entries,
        root: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
    })
}

/// Structural invariants: parallel references resolve, pre-corruption
/// transcripts match, EL parallels point at typical entries, WAVs exist.
pub fn validate_manifest(manifest: &Manifest) -> Result<(), CorpusError> {
    let by_id: HashMap<&str, &ManifestEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.utterance_id.as_str(), e))
        .collect();
    if by_id.len() != manifest.entries.len() {
        return Err(CorpusError::InvalidManifest("duplicate utterance ids".into()));
    }
    for entry in &manifest.entries {
        if entry.transcript.is_empty() {
            return Err(CorpusError::InvalidManifest(format!(
                "{} has an empty transcript",
                entry.utterance_id
            )));
        }
        if parse_transcript(&entry.transcript).is_none() {
            return Err(CorpusError::InvalidManifest(format!(
                "{} has symbols outside the inventory",
                entry.utterance_id
            )));
        }
        if let Some(pid) = &entry.parallel_id {
            let target = by_id.get(pid.as_str()).ok_or_else(|| {
                CorpusError::InvalidManifest(format!(
                    "{} references missing parallel {pid}",
                    entry.utterance_id
                ))
            })?;
            if target.transcript != entry.transcript {
                return Err(CorpusError::InvalidManifest(format!(
                    "parallel pair {} / {pid} transcripts differ",
                    entry.utterance_id
                )));
            }
            if entry.speech_type == SpeechType::El && target.speech_type != SpeechType::Typical {
                return Err(CorpusError::InvalidManifest(format!(
                    "EL entry {} parallels a non-typical entry",
                    entry.utterance_id
                )));
            }
            if entry.split != target.split {
                return Err(CorpusError::InvalidManifest(format!(
                    "parallel pair {} / {pid} crosses splits",
                    entry.utterance_id
                )));
            }
        }
        if !manifest.wav_path(entry).exists() {
            return Err(CorpusError::InvalidManifest(format!(
                "missing wav for {}",
                entry.utterance_id
            )));
        }
    }
    Ok(())
}

/// Corpus build settings. Defaults give the paper-shaped 116/40/40 target
/// split plus desk-scale auxiliary groups for every training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Total target-group utterances; must equal the split sum.
    pub n_target: usize,
    pub split_counts: (usize, usize, usize),
    pub symbols_min: usize,
    pub symbols_max: usize,
    pub target_speaker: SpeakerSpec,
    pub el_speaker: SpeakerSpec,
    /// Extra pseudo-EL speakers for the multiple-EL ablation; each renders
    /// the same target transcripts as additional train-only EL data.
    pub extra_el_speakers: Vec<SpeakerSpec>,
    pub pool_speakers: Vec<SpeakerSpec>,
    pub pool_utts_per_speaker: usize,
    /// Parallel-VC pretraining pairs (two dedicated typical speakers).
    pub vc_pairs: usize,
    /// Synthetic-EL pairs for intermediate fine-tuning stages.
    pub synel_pairs: usize,
    /// Voice used to render synthetic EL before degradation.
    pub synel_voice: SpeakerSpec,
    /// Corruption rate of the synthetic-EL group (noisier than target EL).
    pub synel_corruption_prob: f64,
    pub el_params: ElSimulationParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let pool = vec![
            SpeakerSpec::new("pool_00", 105.0, 1.10),
            SpeakerSpec::new("pool_01", 210.0, 0.94),
            SpeakerSpec::new("pool_02", 130.0, 1.05),
            SpeakerSpec::new("pool_03", 185.0, 0.97),
            SpeakerSpec::new("pool_04", 115.0, 1.02),
            SpeakerSpec::new("pool_05", 225.0, 0.92),
            SpeakerSpec::new("pool_06", 150.0, 1.07),
            SpeakerSpec::new("pool_07", 170.0, 1.00),
        ];
        CorpusConfig {
            seed: 42,
            n_target: 196,
            split_counts: (116, 40, 40),
            symbols_min: 10,
            symbols_max: 18,
            target_speaker: SpeakerSpec::new("target", 190.0, 0.96),
            el_speaker: SpeakerSpec::new("el_speaker", 120.0, 1.06),
            extra_el_speakers: Vec::new(),
            pool_speakers: pool,
            pool_utts_per_speaker: 30,
            vc_pairs: 100,
            synel_pairs: 100,
            synel_voice: SpeakerSpec::new("el_syn_voice", 125.0, 1.10),
            synel_corruption_prob: 0.25,
            el_params: ElSimulationParams::default(),
        }
    }
}

enum Render {
    Typical { speaker: SpeakerSpec },
    El { via: SpeakerSpec, params: ElSimulationParams },
}

struct Plan {
    id: String,
    transcript: Vec<PhoneId>,
    split: Split,
    render: Render,
    parallel_id: Option<String>,
    /// Speaker recorded in the manifest (EL renders carry the EL voice id).
    manifest_speaker: String,
}

fn random_transcript(rng: &mut Prng, config: &CorpusConfig) -> Vec<PhoneId> {
    let len = config.symbols_min + rng.below(config.symbols_max - config.symbols_min + 1);
    (0..len)
        .map(|_| rng.below(phones::inventory_size()) as PhoneId)
        .collect()
}

fn plan_corpus(config: &CorpusConfig) -> Result<Vec<Plan>, CorpusError> {
    let (n_train, n_dev, n_test) = config.split_counts;
    if n_train + n_dev + n_test != config.n_target {
        return Err(CorpusError::ConfigError(format!(
            "split counts {}+{}+{} do not sum to n_target {}",
            n_train, n_dev, n_test, config.n_target
        )));
    }
    if config.symbols_min == 0 || config.symbols_min > config.symbols_max {
        return Err(CorpusError::ConfigError("bad symbols_min/symbols_max".into()));
    }
    if config.el_params.corruption_prob >= 1.0 || config.el_params.corruption_prob < 0.0 {
        return Err(CorpusError::ConfigError("corruption_prob must be in [0, 1)".into()));
    }
    if config.el_params.tempo_factor < 1.0 {
        return Err(CorpusError::ConfigError("tempo_factor must be >= 1".into()));
    }
    let mut plans = Vec::new();
    let split_of = |i: usize| {
        if i < n_train {
            (Split::Train, "train")
        } else if i < n_train + n_dev {
            (Split::Dev, "dev")
        } else {
            (Split::Test, "test")
        }
    };

    // Target parallel group.
    let mut split_index = [0usize; 3];
    for i in 0..config.n_target {
        let mut rng = Prng::derive(config.seed, "text-target", i as u64);
        let transcript = random_transcript(&mut rng, config);
        let (split, split_name) = split_of(i);
        let k = split as usize;
        let typ_id = format!("tgt_typ_{}_{:03}", split_name, split_index[k]);
        let el_id = format!("tgt_el_{}_{:03}", split_name, split_index[k]);
        split_index[k] += 1;
        plans.push(Plan {
            id: typ_id.clone(),
            transcript: transcript.clone(),
            split,
            render: Render::Typical { speaker: config.target_speaker.clone() },
            parallel_id: None,
            manifest_speaker: config.target_speaker.id.clone(),
        });
        let el_params = ElSimulationParams {
            seed: Prng::derive(config.seed, "el-seed", i as u64).next_u64(),
            ..config.el_params.clone()
        };
        plans.push(Plan {
            id: el_id,
            transcript: transcript.clone(),
            split,
            render: Render::El { via: config.el_speaker.clone(), params: el_params },
            parallel_id: Some(typ_id.clone()),
            manifest_speaker: config.el_speaker.id.clone(),
        });
        // Optional extra pseudo-EL speakers (train only).
        if split == Split::Train {
            for (s, spk) in config.extra_el_speakers.iter().enumerate() {
                let params = ElSimulationParams {
                    seed: Prng::derive(config.seed, "el-extra-seed", (i * 101 + s) as u64).next_u64(),
                    ..config.el_params.clone()
                };
                plans.push(Plan {
                    id: format!("tgt_elx{}_{}_{:03}", s, split_name, split_index[k] - 1),
                    transcript: transcript.clone(),
                    split,
                    render: Render::El { via: spk.clone(), params },
                    parallel_id: Some(typ_id.clone()),
                    manifest_speaker: spk.id.clone(),
                });
            }
        }
    }

    // Multi-speaker pool (train only).
    for (s, spk) in config.pool_speakers.iter().enumerate() {
        for i in 0..config.pool_utts_per_speaker {
            let mut rng = Prng::derive(config.seed, &format!("text-pool-{s}"), i as u64);
            plans.push(Plan {
                id: format!("pool_{:02}_{:03}", s, i),
                transcript: random_transcript(&mut rng, config),
                split: Split::Train,
                render: Render::Typical { speaker: spk.clone() },
                parallel_id: None,
                manifest_speaker: spk.id.clone(),
            });
        }
    }

    // Parallel VC pairs: vc_source -> vc_target render identical text.
    let vc_source = SpeakerSpec::new("vc_source", 205.0, 0.93);
    let vc_target = SpeakerSpec::new("vc_target", 125.0, 1.08);
    for i in 0..config.vc_pairs {
        let mut rng = Prng::derive(config.seed, "text-vc", i as u64);
        let transcript = random_transcript(&mut rng, config);
        let tgt_id = format!("vc_tgt_{:03}", i);
        plans.push(Plan {
            id: tgt_id.clone(),
            transcript: transcript.clone(),
            split: Split::Train,
            render: Render::Typical { speaker: vc_target.clone() },
            parallel_id: None,
            manifest_speaker: vc_target.id.clone(),
        });
        plans.push(Plan {
            id: format!("vc_src_{:03}", i),
            transcript,
            split: Split::Train,
            render: Render::Typical { speaker: vc_source.clone() },
            parallel_id: Some(tgt_id),
            manifest_speaker: vc_source.id.clone(),
        });
    }

    // Synthetic-EL pairs for intermediate fine-tuning (train only).
    for i in 0..config.synel_pairs {
        let mut rng = Prng::derive(config.seed, "text-synel", i as u64);
        let transcript = random_transcript(&mut rng, config);
        let typ_id = format!("synel_typ_{:03}", i);
        plans.push(Plan {
            id: typ_id.clone(),
            transcript: transcript.clone(),
            split: Split::Train,
            render: Render::Typical { speaker: config.target_speaker.clone() },
            parallel_id: None,
            manifest_speaker: config.target_speaker.id.clone(),
        });
        let params = ElSimulationParams {
            corruption_prob: config.synel_corruption_prob,
            seed: Prng::derive(config.seed, "synel-seed", i as u64).next_u64(),
            ..config.el_params.clone()
        };
        plans.push(Plan {
            id: format!("synel_el_{:03}", i),
            transcript,
            split: Split::Train,
            render: Render::El { via: config.synel_voice.clone(), params },
            parallel_id: Some(typ_id),
            manifest_speaker: config.synel_voice.id.clone(),
        });
    }
    Ok(plans)
}

fn render_plan(plan: &Plan, seed: u64) -> Result<Utterance, CorpusError> {
    let render_seed = Prng::derive(seed, &plan.id, 0).next_u64();
    match &plan.render {
        Render::Typical { speaker } => {
            let mut u = generate_typical(&plan.id, &plan.transcript, speaker, render_seed)?;
            u.source_id = plan.parallel_id.clone();
            Ok(u)
        }
        Render::El { via, params } => {
            let src = generate_typical(
                plan.parallel_id.as_deref().unwrap_or(&plan.id),
                &plan.transcript,
                via,
                render_seed,
            )?;
            let mut el = simulate_el(&src, via, params)?;
            el.id = plan.id.clone();
            el.source_id = plan.parallel_id.clone();
            Ok(el)
        }
    }
}

/// Builds the corpus under `out_dir`: WAV files plus `manifest.jsonl`.
///
/// The build is a pure function of (config, seed); rerunning writes
/// byte-identical output.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<Manifest, CorpusError> {
    let plans = plan_corpus(config)?;
    std::fs::create_dir_all(out_dir.join("wav")).map_err(|e| IoError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let rendered: Result<Vec<(Utterance, &Plan)>, CorpusError> = plans
        .par_iter()
        .map(|plan| render_plan(plan, config.seed).map(|u| (u, plan)))
        .collect();
    let rendered = rendered?;
    let mut entries = Vec::with_capacity(rendered.len());
    for (utterance, plan) in &rendered {
        let rel = format!("wav/{}.wav", plan.id);
        write_wav(&out_dir.join(&rel), &utterance.waveform, SAMPLE_RATE)?;
        entries.push(ManifestEntry {
            utterance_id: plan.id.clone(),
            file_path: rel,
            transcript: transcript_to_string(&plan.transcript),
            speech_type: utterance.speech_type,
            speaker_id: plan.manifest_speaker.clone(),
            split: plan.split,
            parallel_id: plan.parallel_id.clone(),
        });
    }
    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_target: 10,
            split_counts: (6, 2, 2),
            pool_speakers: vec![
                SpeakerSpec::new("pool_00", 110.0, 1.05),
                SpeakerSpec::new("pool_01", 200.0, 0.95),
            ],
            pool_utts_per_speaker: 3,
            vc_pairs: 3,
            synel_pairs: 3,
            symbols_min: 6,
            symbols_max: 9,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn default_split_counts_match_table() {
        let config = CorpusConfig::default();
        assert_eq!(config.split_counts, (116, 40, 40));
        let plans = plan_corpus(&config).unwrap();
        for (split, name, expected) in [
            (Split::Train, "train", 116usize),
            (Split::Dev, "dev", 40),
            (Split::Test, "test", 40),
        ] {
            let typ = plans
                .iter()
                .filter(|p| p.split == split && p.id.starts_with("tgt_typ"))
                .count();
            let el = plans
                .iter()
                .filter(|p| p.split == split && p.id.starts_with("tgt_el_"))
                .count();
            assert_eq!(typ, expected, "{name} typical");
            assert_eq!(el, expected, "{name} el");
        }
    }

    #[test]
    fn bad_split_sum_is_config_error() {
        let config = CorpusConfig {
            n_target: 100,
            split_counts: (50, 30, 30),
            ..CorpusConfig::default()
        };
        assert!(matches!(
            plan_corpus(&config),
            Err(CorpusError::ConfigError(_))
        ));
    }

    #[test]
    fn build_load_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus(&small_config(), dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.entries, loaded.entries);
        validate_manifest(&loaded).unwrap();
    }

    #[test]
    fn el_test_entries_parallel_typical_test_entries() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_corpus(&small_config(), dir.path()).unwrap();
        let mut seen = 0;
        for entry in &manifest.entries {
            if entry.speech_type == SpeechType::El && entry.split == Split::Test {
                let pid = entry.parallel_id.as_ref().expect("EL entries are parallel");
                let target = manifest.entry(pid).expect("parallel resolves");
                assert_eq!(target.speech_type, SpeechType::Typical);
                assert_eq!(target.split, Split::Test);
                assert_eq!(target.transcript, entry.transcript);
                seen += 1;
            }
        }
        assert_eq!(seen, 2);
    }

    #[test]
    fn build_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = small_config();
        build_corpus(&config, dir_a.path()).unwrap();
        build_corpus(&config, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("wav/tgt_el_train_002.wav")).unwrap();
        let b = std::fs::read(dir_b.path().join("wav/tgt_el_train_002.wav")).unwrap();
        assert_eq!(a, b);
        let ma = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn duration_ratio_matches_table_calibration() {
        // tempo_factor 5.77/4.38 reproduces the reported duration ratio
        // between the EL and typical train splits within 2%.
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.el_params.tempo_factor = 5.77 / 4.38;
        let manifest = build_corpus(&config, dir.path()).unwrap();
        let total = |prefix: &str| -> f64 {
            manifest
                .entries
                .iter()
                .filter(|e| e.utterance_id.starts_with(prefix) && e.split == Split::Train)
                .map(|e| {
                    let (w, _) = read_wav(&manifest.wav_path(e)).unwrap();
                    w.len() as f64 / SAMPLE_RATE as f64
                })
                .sum()
        };
        let typ = total("tgt_typ_");
        let el = total("tgt_el_");
        let ratio = el / typ;
        let expected = 5.77 / 4.38;
        assert!(
            (ratio / expected - 1.0).abs() < 0.02,
            "ratio {ratio} vs {expected}"
        );
    }

    #[test]
    fn validate_catches_broken_parallel() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = build_corpus(&small_config(), dir.path()).unwrap();
        for e in &mut manifest.entries {
            if e.parallel_id.is_some() {
                e.parallel_id = Some("missing_id".to_string());
                break;
            }
        }
        assert!(validate_manifest(&manifest).is_err());
    }
}
