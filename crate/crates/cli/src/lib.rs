//! Command-line harness: data generation, base pretraining, continual runs,
//! ablation grids, gradient checking, and report tables.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 3 numerical failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Axis, GradcheckOptions, GRADCHECK_TOL};
use config::{Mode, RunConfig};
use leaf_core::data_synth::GeneratorSpec;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed: max relative error {error:e} > {tol:e}")]
    GradCheck { error: f64, tol: f64 },
    #[error(transparent)]
    Core(#[from] leaf_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::GradCheck { .. } => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "leaf", version, about = "Few-shot continual event detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its label descriptions.
    GenData {
        /// Generator spec (TOML or JSON). Defaults to the `[data]` section of --config.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder on the base task and freeze it.
    PretrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One continual run over the task stream.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one ablation axis over `n_seeds` seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check analytic gradients of the full objective on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use a deliberately wrong backward rule; the check must fail.
        #[arg(long)]
        inject_grad_fault: bool,
        /// Put a NaN into the model before checking.
        #[arg(long)]
        poison_nan: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate run directories into mean±std tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path.map(PathBuf::as_path))?;
    cfg.resolve_seed(seed)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, config, out } => {
            let spec = match spec {
                Some(p) => {
                    let text = leaf_core::fsutil::read_to_string(&p).map_err(|e| CliError::Config(e.to_string()))?;
                    let parsed: Result<GeneratorSpec, String> = if p.extension().is_some_and(|e| e == "json") {
                        serde_json::from_str(&text).map_err(|e| e.to_string())
                    } else {
                        toml::from_str(&text).map_err(|e| e.to_string())
                    };
                    parsed.map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
                }
                None => RunConfig::load(config.as_deref())?.data,
            };
            commands::gen_data(&spec, &out)
        }
        Command::PretrainBase {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_ref(), seed)?;
            let data = commands::resolve_dir(data, &cfg.paths.data_dir, "data")?;
            commands::pretrain_base(&cfg, &data, &out).map(|_| ())
        }
        Command::Train {
            config,
            data,
            base,
            out,
            mode,
            seed,
        } => {
            let mut cfg = load_config(config.as_ref(), seed)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let data = commands::resolve_dir(data, &cfg.paths.data_dir, "data")?;
            let base = commands::resolve_dir(base, &cfg.paths.base_dir, "base")?;
            cfg.paths.data_dir = Some(data.clone());
            cfg.paths.base_dir = Some(base.clone());
            let prep = commands::prepare(&data, &base)?;
            let result = commands::train_run(&cfg, &prep, Some(&out))?;
            println!(
                "final cumulative micro-F1 {:.4}, forgetting {:.4}",
                result.matrix.final_cumulative_micro().unwrap_or(0.0),
                result.forgetting.mean
            );
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            base,
            axis,
            out,
            seed,
        } => {
            let mut cfg = load_config(config.as_ref(), seed)?;
            let data = commands::resolve_dir(data, &cfg.paths.data_dir, "data")?;
            let base = commands::resolve_dir(base, &cfg.paths.base_dir, "base")?;
            cfg.paths.data_dir = Some(data.clone());
            cfg.paths.base_dir = Some(base.clone());
            let prep = commands::prepare(&data, &base)?;
            let runs = commands::ablate(&cfg, &prep, axis, &out)?;
            for s in commands::summarize(&runs) {
                println!(
                    "{:<22} final {}  forgetting {}",
                    s.setting,
                    s.final_f1.render(),
                    s.forgetting.render()
                );
            }
            Ok(())
        }
        Command::Gradcheck {
            config,
            inject_grad_fault,
            poison_nan,
            seed,
        } => {
            let cfg = load_config(config.as_ref(), seed)?;
            let error = commands::gradcheck(GradcheckOptions {
                inject_fault: inject_grad_fault,
                poison_nan,
                seed: cfg.seed,
            })?;
            println!("max relative error {error:e} (tolerance {GRADCHECK_TOL:e})");
            if error <= GRADCHECK_TOL {
                Ok(())
            } else {
                Err(CliError::GradCheck {
                    error,
                    tol: GRADCHECK_TOL,
                })
            }
        }
        Command::Report { runs, out } => {
            print!("{}", commands::report(&runs, &out)?);
            Ok(())
        }
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
