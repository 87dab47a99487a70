//! Command-line front end: corpus generation, stage training, evaluation
//! grids, and artifact export, all driven by one flat TOML config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{Ctx, ExportKind, Grid, Stage};
use config::{RunConfig, OUT_ENV};
use shield_core::afgan::GenId;
use shield_core::error::Error;

#[derive(Parser)]
#[command(
    name = "shield",
    version,
    about = "Train and evaluate waveform anti-forensic attacks and the paired-input defense"
)]
struct Cli {
    /// Path to a TOML run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root override (also settable via SHIELD_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum concurrent evaluation cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus: WAV files plus a manifest.
    GenCorpus,
    /// Train one pipeline stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// Restrict generator stages to a single generator.
        #[arg(long, value_parser = parse_gen)]
        gen: Option<GenId>,
        /// Also feed unattacked fakes to the defense classifier as negatives.
        #[arg(long)]
        include_plain_fakes: bool,
        /// Discriminator loss form override.
        #[arg(long, value_parser = ["standard", "as_printed"])]
        d_loss_form: Option<String>,
    },
    /// Evaluate trained checkpoints and write a CSV report.
    Eval {
        #[arg(value_enum)]
        grid: GridArg,
        /// Narrow to one attacking generator.
        #[arg(long, value_parser = parse_gen)]
        attack_gen: Option<GenId>,
        /// Narrow to one defense generator.
        #[arg(long, value_parser = parse_gen)]
        defense_gen: Option<GenId>,
        /// Which defense cells to run: match, mismatch, or both.
        #[arg(long, value_parser = ["match", "mismatch", "both"])]
        settings: Option<String>,
        /// Evaluate checkpoints even if they carry different config hashes.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Export inspection artifacts from trained models.
    Export {
        #[arg(value_enum)]
        kind: KindArg,
        /// Generator for spectrogram export.
        #[arg(long, value_parser = parse_gen)]
        gen: Option<GenId>,
        /// Attacking generator for embedding export.
        #[arg(long, value_parser = parse_gen)]
        attack_gen: Option<GenId>,
        /// Defense generator for embedding export.
        #[arg(long, value_parser = parse_gen)]
        defense_gen: Option<GenId>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Detector,
    Attack,
    Defense,
    Shield,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridArg {
    Baseline,
    Attack,
    Defense,
    Correlation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Spectrogram,
    Embeddings,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Detector => Stage::Detector,
            StageArg::Attack => Stage::Attack,
            StageArg::Defense => Stage::Defense,
            StageArg::Shield => Stage::Shield,
        }
    }
}

impl From<GridArg> for Grid {
    fn from(g: GridArg) -> Grid {
        match g {
            GridArg::Baseline => Grid::Baseline,
            GridArg::Attack => Grid::Attack,
            GridArg::Defense => Grid::Defense,
            GridArg::Correlation => Grid::Correlation,
        }
    }
}

impl From<KindArg> for ExportKind {
    fn from(k: KindArg) -> ExportKind {
        match k {
            KindArg::Spectrogram => ExportKind::Spectrogram,
            KindArg::Embeddings => ExportKind::Embeddings,
        }
    }
}

fn parse_gen(s: &str) -> Result<GenId, String> {
    GenId::parse(&s.to_ascii_lowercase()).map_err(|e| e.to_string())
}

/// 0 success, 1 config/usage error, 2 missing dependency, 3 broken invariant.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingCheckpoint(_) | Error::MissingFile(_) => 2,
        Error::Internal(_)
        | Error::CheckpointFormat(_)
        | Error::LengthMismatch { .. }
        | Error::DimensionMismatch { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> shield_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    } else if let Ok(env_out) = std::env::var(OUT_ENV) {
        if !env_out.is_empty() {
            cfg.out_dir = env_out;
        }
    }
    match cli.cmd {
        Cmd::GenCorpus => {
            let ctx = Ctx::new(cfg)?;
            commands::cmd_gen_corpus(&ctx)
        }
        Cmd::Train {
            stage,
            gen,
            include_plain_fakes,
            d_loss_form,
        } => {
            if include_plain_fakes {
                cfg.include_plain_fakes = true;
            }
            if let Some(form) = d_loss_form {
                cfg.gan_d_loss_form = form;
            }
            let ctx = Ctx::new(cfg)?;
            commands::cmd_train(&ctx, stage.into(), gen)
        }
        Cmd::Eval {
            grid,
            attack_gen,
            defense_gen,
            settings,
            allow_mixed,
        } => {
            if let Some(s) = settings {
                cfg.settings = s;
            }
            let ctx = Ctx::new(cfg)?;
            commands::cmd_eval(&ctx, grid.into(), attack_gen, defense_gen, allow_mixed)
        }
        Cmd::Export {
            kind,
            gen,
            attack_gen,
            defense_gen,
        } => {
            let ctx = Ctx::new(cfg)?;
            commands::cmd_export(&ctx, kind.into(), gen, attack_gen, defense_gen)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
