//! `transam`: generate synthetic graphs, train, evaluate, inspect attention
//! and check gradients from a TOML run configuration.

mod commands;
mod config;
mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transam::kg::Split;
use transam::model::MaskMode;

use crate::config::{extract_overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "transam",
    version,
    about = "One-shot relation learning with a local-global attention matcher",
    after_help = "Any configuration key can be overridden with --section.key=value, e.g. --model.d_e=8 --train.steps=200."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run seed; for `generate`, the synthetic graph seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "MODE")]
    mask_mode: Option<MaskMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (triples, task splits, candidates).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; prints the final validation metrics as JSON.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints metrics as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// train, valid or test; defaults to `eval.split`.
        #[arg(long)]
        split: Option<Split>,
        /// Comma-separated relation names to restrict evaluation to.
        #[arg(long, value_name = "CSV", value_delimiter = ',')]
        relations: Option<Vec<String>>,
    },
    /// Dump masks, roles, positions and attention weights for one episode.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Entity names `h1,t1,...,hq,tq`; defaults to the first query of
        /// the first relation of the split.
        #[arg(long, value_name = "CSV", value_delimiter = ',')]
        episode: Option<Vec<String>>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Finite-difference check of every model gradient; without --config the
    /// model is d_e=4, heads=2, layers=2, k=1.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Adds this offset to one analytic gradient coordinate.
        #[arg(long, hide = true, value_name = "DELTA")]
        inject_grad_bug: Option<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Inspect { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

/// Model used by `gradcheck` when no configuration file is given.
const GRADCHECK_DEFAULTS: &str = "[model]\nd_e = 4\nheads = 2\nlayers = 2\nk = 1\n";

fn load_config(common: &Common, fallback: &str, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), fallback, overrides)?;
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = common.mask_mode {
        cfg.model.mask_mode = m;
    }
    Ok(cfg)
}

/// Training logs go to `<out>/train.log` with timestamps; everything else
/// logs warnings to stderr without them, so stdout and stderr stay
/// reproducible.
fn init_logging(log_file: Option<&Path>) -> Result<(), CliError> {
    let env = env_logger::Env::default().default_filter_or(if log_file.is_some() { "info" } else { "warn" });
    let mut builder = env_logger::Builder::from_env(env);
    match log_file {
        Some(path) => {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            builder
                .target(env_logger::Target::Pipe(Box::new(file)))
                .format_timestamp_millis();
        }
        None => {
            builder.format_timestamp(None);
        }
    }
    builder.init();
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<ExitCode, CliError> {
    let fallback = match cli.command {
        Command::Gradcheck { .. } => GRADCHECK_DEFAULTS,
        _ => "",
    };
    let mut cfg = load_config(cli.command.common(), fallback, overrides)?;
    let log_file = match &cli.command {
        Command::Train { .. } => Some(cfg.out_dir()?.join("train.log")),
        _ => None,
    };
    init_logging(log_file.as_deref())?;

    let mut stdout = std::io::stdout().lock();
    let mut emit = |s: &str| writeln!(stdout, "{s}").map_err(|e| CliError::io(Path::new("<stdout>"), e));
    match &cli.command {
        Command::Generate { common } => {
            if common.config.is_none() && cfg.synthetic.is_none() {
                cfg.synthetic = Some(transam::kg::SyntheticSpec::default());
            }
            if let (Some(seed), Some(spec)) = (common.seed, cfg.synthetic.as_mut()) {
                spec.seed = seed;
            }
            emit(&commands::generate(&cfg)?)?;
        }
        Command::Train { checkpoint, .. } => {
            let report = commands::train(&cfg, checkpoint.as_deref())?;
            emit(&report.to_json())?;
        }
        Command::Eval {
            checkpoint,
            split,
            relations,
            common,
        } => {
            let split = split.unwrap_or(cfg.eval.split);
            let report = commands::eval(&cfg, checkpoint, split, relations.clone(), common.mask_mode)?;
            emit(&report.to_json())?;
        }
        Command::Inspect {
            checkpoint,
            episode,
            split,
            common,
        } => {
            let split = split.unwrap_or(cfg.eval.split);
            emit(&commands::inspect(
                &cfg,
                checkpoint,
                episode.clone(),
                split,
                common.mask_mode,
            )?)?;
        }
        Command::Gradcheck { inject_grad_bug, .. } => {
            let outcome = commands::gradcheck(&cfg, *inject_grad_bug)?;
            emit(outcome.text.trim_end())?;
            if !outcome.passed {
                return Err(CliError::Check("gradient check failed".into()));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
