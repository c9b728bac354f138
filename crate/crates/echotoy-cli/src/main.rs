//! Command-line driver for the echotoy pipeline.
//!
//! Every subcommand maps to one pipeline stage (plus `e2e`, which runs them
//! all in order). Stages communicate through files in `--out`, so any prefix
//! of the pipeline can be re-run or resumed; artifacts from a different
//! configuration are rejected unless `--force` is given.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, unreadable or
//! invalid config), 2 when a stage fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use echotoy::pipeline::{run_e2e, run_stage, PipelineConfig, StageCtx, StageRecord};

#[derive(Parser, Debug)]
#[command(name = "echotoy", version, about = "Toy echocardiogram generative pipeline")]
struct Cli {
    /// Pipeline config file (`key = value` with [section] headers).
    /// Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed; overrides `[run] seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Proceed even when existing artifacts were produced under a different
    /// configuration.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the real train/val/test datasets.
    GenData,
    /// Train the adversarial autoencoder and freeze its latent statistics.
    TrainAvae,
    /// Encode every real video into latent posteriors.
    Encode,
    /// Train the latent image flow on end-diastolic frames.
    TrainLifm,
    /// Train the re-identification encoder and record validation accuracy.
    TrainReid,
    /// Sample the anatomy pool and apply the privacy filter.
    Filter,
    /// Train the latent video flow on full clips.
    TrainLvfm,
    /// Animate anatomies into the npc/pc synthetic datasets.
    Synthesize,
    /// Train the four ejection-fraction regressors (real, recon, npc, pc).
    TrainEf,
    /// Evaluate every regressor on the real test split.
    Evaluate,
    /// Write report.json and report.csv from the evaluation metrics.
    Report,
    /// Run every stage in dependency order.
    E2e {
        /// Stop after this stage instead of running to the end.
        #[arg(long)]
        stage: Option<String>,
    },
}

impl Command {
    fn stage_name(&self) -> Option<&'static str> {
        match self {
            Command::GenData => Some("gen-data"),
            Command::TrainAvae => Some("train-avae"),
            Command::Encode => Some("encode"),
            Command::TrainLifm => Some("train-lifm"),
            Command::TrainReid => Some("train-reid"),
            Command::Filter => Some("filter"),
            Command::TrainLvfm => Some("train-lvfm"),
            Command::Synthesize => Some("synthesize"),
            Command::TrainEf => Some("train-ef"),
            Command::Evaluate => Some("evaluate"),
            Command::Report => Some("report"),
            Command::E2e { .. } => None,
        }
    }
}

fn print_record(rec: &StageRecord) {
    println!("{}: ok in {} ms", rec.name, rec.wall_ms);
    if !rec.artifacts.is_empty() {
        println!("  artifacts: {}", rec.artifacts.join(" "));
    }
    if let Some(map) = rec.info.as_object() {
        for (k, v) in map {
            println!("  {k} = {v}");
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version are not errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    // Config problems are usage errors: the pipeline never started.
    let mut cfg = match &cli.config {
        Some(path) => match PipelineConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }

    let ctx = StageCtx::new(cfg, &cli.out, cli.force);
    let outcome = match &cli.command {
        Command::E2e { stage } => run_e2e(&ctx, stage.as_deref()).map(|records| {
            for rec in &records {
                print_record(rec);
            }
        }),
        cmd => {
            let name = cmd.stage_name().expect("every non-e2e command is a stage");
            run_stage(&ctx, name).map(|rec| print_record(&rec))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
