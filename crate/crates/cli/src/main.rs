//! Command line front end for the speech enhancement toolkit.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for stage
//! failures.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use elvc::corpus::{build_corpus, load_manifest, validate_manifest, CorpusConfig};
use elvc::dsp::DspParams;
use elvc::io::{write_matrix, Dtype};
use elvc::pipeline::{
    convert_file, evaluate_system, run_experiment, ExperimentConfig, PipelineError, StageOutcome,
    SystemLineage,
};
use elvc::recognition::RecognizerModel;
use elvc::synthesis::{speaker_embedding_from_file, DiffusionDecoder};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "elvc", version, about = "Electrolaryngeal speech intelligibility enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus generation and validation.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Train one module (recognition, alignment, synthesis) or everything.
    Train {
        #[command(subcommand)]
        module: TrainModule,
    },
    /// Run the full experiment: every stage for every configured system.
    Run(RunArgs),
    /// Extract bottleneck features for every manifest utterance.
    Bnf {
        #[command(subcommand)]
        action: BnfAction,
    },
    /// Sample a mel-spectrogram from units and vocode it to a WAV.
    Synthesize(SynthesizeArgs),
    /// Convert one EL WAV into the target voice.
    Convert(ConvertArgs),
    /// Evaluate a trained system over the test split.
    Evaluate(EvaluateArgs),
    /// Render the collected evaluation rows as an aligned table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Generate the synthetic corpus.
    Gen {
        /// Corpus config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check manifest invariants.
    Validate { manifest: PathBuf },
}

#[derive(Subcommand)]
enum TrainModule {
    Recognition {
        /// Training stage (1, 2 or 3); earlier stages are cached.
        #[arg(long)]
        stage: u8,
        #[command(flatten)]
        common: TrainCommon,
    },
    Alignment {
        /// System id from the experiment config (e.g. sys4).
        #[arg(long)]
        system: String,
        #[command(flatten)]
        common: TrainCommon,
    },
    Synthesis {
        /// pretrain or adapt (adapt implies pretrain, both cached).
        #[arg(long)]
        phase: String,
        #[command(flatten)]
        common: TrainCommon,
    },
}

#[derive(Args)]
struct TrainCommon {
    /// Experiment config (JSON); desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact root (ELVC_CKPT_ROOT overrides).
    #[arg(long, default_value = "work")]
    work: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "work")]
    work: PathBuf,
}

#[derive(Subcommand)]
enum BnfAction {
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Unit matrix dump (.elvm).
    #[arg(long)]
    units: PathBuf,
    /// Speaker embedding matrix dump (.elvm).
    #[arg(long)]
    spk: PathBuf,
    /// Guidance weight.
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Diffusion decoder checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Griffin-Lim iterations for waveform reconstruction.
    #[arg(long, default_value_t = 40)]
    gl_iters: usize,
}

#[derive(Args)]
struct ConvertArgs {
    /// System lineage JSON produced by `run`.
    #[arg(long)]
    system: PathBuf,
    #[arg(long, name = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing per-system evaluation JSON rows.
    #[arg(long, default_value = "work")]
    work: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn experiment_config(path: &Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::desk_default()),
    }
}

fn print_outcomes(outcomes: &[(String, StageOutcome)]) {
    for (stage, outcome) in outcomes {
        match outcome {
            StageOutcome::Built { elapsed_s } => println!("{stage}: built in {elapsed_s:.1}s"),
            StageOutcome::Cached => println!("{stage}: cached"),
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Corpus { action } => match action {
            CorpusAction::Gen { config, out } => {
                let config: CorpusConfig = match config {
                    Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                        .with_context(|| format!("parsing {}", p.display()))?,
                    None => CorpusConfig::default(),
                };
                let manifest = build_corpus(&config, &out)?;
                println!("wrote {} utterances under {}", manifest.entries.len(), out.display());
            }
            CorpusAction::Validate { manifest } => {
                let m = load_manifest(&manifest)?;
                validate_manifest(&m)?;
                println!("{}: {} entries, all invariants hold", manifest.display(), m.entries.len());
            }
        },
        Command::Run(args) => {
            let config = experiment_config(&args.config)?;
            let (lineages, outcomes) = run_experiment(&config, &args.work)?;
            print_outcomes(&outcomes);
            for lineage in &lineages {
                println!("system {} -> {}", lineage.system_id, lineage.alignment_ckpt.display());
            }
        }
        Command::Train { module } => match module {
            TrainModule::Recognition { stage, common } => {
                if !(1..=3).contains(&stage) {
                    return Err(PipelineError::Config(format!("unknown recognition stage {stage}")).into());
                }
                let config = experiment_config(&common.config)?;
                // Stages chain; running stage N builds 1..=N with caching.
                let mut trimmed = config.clone();
                if stage < 3 {
                    trimmed.rec_stage3.epochs = 0;
                }
                if stage < 2 {
                    trimmed.rec_stage2.epochs = 0;
                }
                let ckpt = elvc::pipeline::recognition_variant(
                    &trimmed,
                    &common.work,
                    elvc::pipeline::RecognitionVariant::SidMasked,
                )?;
                println!("recognition stage {stage} model at {}", ckpt.display());
            }
            TrainModule::Alignment { system, common } => {
                let config = experiment_config(&common.config)?;
                if !config.systems.iter().any(|s| s.id == system) {
                    return Err(PipelineError::Config(format!("system {system} not in config")).into());
                }
                let mut trimmed = config.clone();
                trimmed.systems.retain(|s| s.id == system);
                let (lineages, outcomes) = run_experiment(&trimmed, &common.work)?;
                print_outcomes(&outcomes);
                println!("alignment model at {}", lineages[0].alignment_ckpt.display());
            }
            TrainModule::Synthesis { phase, common } => {
                if phase != "pretrain" && phase != "adapt" {
                    return Err(PipelineError::Config(format!("unknown synthesis phase {phase}")).into());
                }
                let config = experiment_config(&common.config)?;
                let mut trimmed = config.clone();
                if phase == "pretrain" {
                    trimmed.synth_adapt.epochs = 0;
                }
                // Only unit-output systems pull in the decoder.
                trimmed.systems.retain(|s| s.outputs == elvc::alignment::FeatureKind::Units);
                if trimmed.systems.is_empty() {
                    return Err(PipelineError::Config("no unit-output system in config".into()).into());
                }
                trimmed.systems.truncate(1);
                let (lineages, outcomes) = run_experiment(&trimmed, &common.work)?;
                print_outcomes(&outcomes);
                if let Some(ckpt) = &lineages[0].synthesis_ckpt {
                    println!("synthesis model at {}", ckpt.display());
                }
            }
        },
        Command::Bnf { action } => match action {
            BnfAction::Extract { model, manifest, out } => {
                let recognizer = RecognizerModel::load(&model)?;
                let m = load_manifest(&manifest)?;
                let dsp = DspParams::default();
                std::fs::create_dir_all(&out)?;
                for entry in &m.entries {
                    let utt = m.load_utterance(entry)?;
                    let mel = elvc::dsp::mel_spectrogram(&utt.waveform, &dsp)?;
                    let bnf = recognizer.extract_bnf(&mel.frames)?;
                    write_matrix(&out.join(format!("{}.elvm", entry.utterance_id)), &bnf, Dtype::F64)?;
                }
                println!("wrote {} BNF dumps to {}", m.entries.len(), out.display());
            }
        },
        Command::Synthesize(args) => {
            let decoder = DiffusionDecoder::load(&args.model)?;
            let units = elvc::io::read_matrix(&args.units)?;
            let spk = speaker_embedding_from_file(&args.spk)?;
            let mel = decoder.sample(&units, &spk, args.w, args.seed)?;
            let dsp = DspParams::default();
            let mel = elvc::dsp::MelSpectrogram {
                frames: mel,
                frame_shift_ms: dsp.frame_shift as f64 * 1000.0 / dsp.sample_rate as f64,
                frame_length_ms: dsp.frame_length as f64 * 1000.0 / dsp.sample_rate as f64,
                n_mels: dsp.n_mels,
                sample_rate: dsp.sample_rate,
            };
            let wave = elvc::dsp::griffin_lim(&mel, args.gl_iters)?;
            elvc::io::write_wav(&args.out, &wave, dsp.sample_rate)?;
            println!("wrote {}", args.out.display());
        }
        Command::Convert(args) => {
            let lineage = SystemLineage::load(&args.system)?;
            let meta = convert_file(&lineage, &args.input, &args.out, args.seed)?;
            println!(
                "wrote {} (duration ratio {:.3}{})",
                args.out.display(),
                meta.duration_ratio,
                if meta.truncated { ", truncated" } else { "" }
            );
            for (stage, secs) in &meta.stage_seconds {
                println!("  {stage}: {secs:.2}s");
            }
        }
        Command::Evaluate(args) => {
            let lineage = SystemLineage::load(&args.system)?;
            let cache = args
                .out
                .parent()
                .unwrap_or(std::path::Path::new("."))
                .join(format!("converted_{}", lineage.system_id));
            let (row, _) = evaluate_system(&lineage, &args.manifest, &cache, args.seed)?;
            std::fs::write(&args.out, serde_json::to_string_pretty(&row)?)?;
            println!(
                "{}: MCD {:.2} dB, CER {:.1}%, F0 RMSE {:.1} cents, F0 CORR {:.2}",
                row.system_id, row.mcd_db, row.cer_pct, row.f0_rmse_cents, row.f0_corr
            );
        }
        Command::Report(args) => {
            let mut report = elvc::eval::EvalReport::default();
            let dir = args.work.join("reports");
            if dir.is_dir() {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
                    .collect();
                paths.sort();
                for path in paths {
                    let row: elvc::eval::EvalRow = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                    report.rows.push(row);
                }
            }
            let table = report.render_table();
            print!("{table}");
            if let Some(out) = args.out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<PipelineError>()
                .map(|e| e.exit_code())
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
