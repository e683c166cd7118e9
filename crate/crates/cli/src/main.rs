mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mslam_core::trainer::Variant;

use commands::Ctx;
use config::RunConfig;
use rundir::RunDir;

/// Log verbosity (`error`, `warn`, `info`, `debug`); defaults to `warn`.
const LOG_ENV: &str = "MSLAM_LOG";

#[derive(Parser)]
#[command(name = "mslam", version, about = "Joint speech-text pre-training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created atomically.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pre-training variant: mslam-ctc, mslam-tlm, speech-only, mslam-ctc-no-text.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the character vocabulary of the synthetic corpus.
    BuildVocab,
    /// Write the synthetic corpus (manifests and feature files).
    GenSynth,
    /// Pre-train an encoder; writes log.tsv and checkpoint.bin.
    Pretrain,
    /// Fine-tune on classification or translation (finetune.task).
    Finetune,
    /// Fit a CTC probe on the frozen encoder; report ASR and CAE CER.
    Probe,
    /// Zero-shot cross-modal transfer matrix.
    EvalMatrix,
    /// Finite-difference gradient checks of every loss.
    GradCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::BuildVocab => "build-vocab",
            Command::GenSynth => "gen-synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Probe => "probe",
            Command::EvalMatrix => "eval-matrix",
            Command::GradCheck => "grad-check",
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<String> {
    let cfg = match (&cli.config, cli.command) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Command::GradCheck) => RunConfig::default(),
        (None, c) => anyhow::bail!("{} needs --config", c.name()),
    };
    let mut cfg = cfg;
    cfg.override_with(cli.seed, cli.variant);
    cfg.validate()?;
    let ctx = Ctx {
        command: cli.command.name(),
        config_path: cli.config.as_deref(),
        cfg,
    };
    if let Command::GradCheck = cli.command {
        let dir = cli.out.as_deref().map(|o| RunDir::create(o, cli.force)).transpose()?;
        let out = commands::grad_check(&ctx, dir.as_ref())?;
        if let Some(d) = dir {
            d.commit()?;
        }
        return Ok(out);
    }
    let out = cli.out.as_deref().context("--out is required")?;
    let dir = RunDir::create(out, cli.force)?;
    let report = match cli.command {
        Command::BuildVocab => commands::build_vocab(&ctx, &dir)?,
        Command::GenSynth => commands::gen_synth_cmd(&ctx, &dir)?,
        Command::Pretrain => commands::pretrain(&ctx, &dir)?,
        Command::Finetune => commands::finetune(&ctx, &dir)?,
        Command::Probe => commands::probe(&ctx, &dir)?,
        Command::EvalMatrix => commands::eval_matrix(&ctx, &dir)?,
        Command::GradCheck => unreachable!("handled above"),
    };
    dir.commit()?;
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            if !report.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mslam: {e:#}");
            ExitCode::FAILURE
        }
    }
}
