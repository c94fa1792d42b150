use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use matrix_cli::commands::{self, EvalMethod};
use matrix_cli::config::{self, RunConfig};
use matrix_core::baselines::BaselineMethod;
use matrix_core::gateway::scripted::ScriptFlavor;

#[derive(Parser)]
#[command(
    name = "matrix",
    version,
    about = "Train and evaluate a document-extraction agent with experience-refined memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the run config comes from: a file or a shipped preset.
#[derive(Args)]
struct ConfigSource {
    /// Path to a run-config TOML file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset: paper-full | paper-anonymized.
    #[arg(long)]
    preset: Option<String>,
}

/// Field overrides that apply on top of the loaded config.
#[derive(Args)]
struct Overrides {
    /// Override output.run_dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Override data.manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Override train.epochs.
    #[arg(long)]
    epochs: Option<u64>,
    /// Override both split.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self, overrides: &Overrides) -> Result<RunConfig> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), None) => config::load_config(path)?,
            (None, Some(name)) => {
                let text = config::preset(name).with_context(|| {
                    format!(
                        "unknown preset {name:?}; shipped presets: {}",
                        config::PRESET_NAMES.join(", ")
                    )
                })?;
                config::parse_config(text)?
            }
            _ => bail!("pass exactly one of --config <file> or --preset <name>"),
        };
        if let Some(run_dir) = &overrides.run_dir {
            config.output.run_dir = run_dir.clone();
        }
        if let Some(manifest) = &overrides.manifest {
            config.data.manifest = manifest.clone();
        }
        if let Some(epochs) = overrides.epochs {
            config.train.epochs = epochs;
        }
        if let Some(seed) = overrides.seed {
            config.split.spec.seed = seed;
            config.train.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Matrix,
    Cot,
    Vanilla,
    Reflexion,
}

impl MethodArg {
    fn eval_method(self) -> EvalMethod {
        match self {
            MethodArg::Matrix => EvalMethod::Matrix,
            MethodArg::Cot => EvalMethod::Baseline(BaselineMethod::Cot),
            MethodArg::Vanilla => EvalMethod::Baseline(BaselineMethod::Vanilla),
            MethodArg::Reflexion => EvalMethod::Baseline(BaselineMethod::Reflexion),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    Cot,
    Vanilla,
    Reflexion,
}

impl BaselineArg {
    fn method(self) -> BaselineMethod {
        match self {
            BaselineArg::Cot => BaselineMethod::Cot,
            BaselineArg::Vanilla => BaselineMethod::Vanilla,
            BaselineArg::Reflexion => BaselineMethod::Reflexion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FlavorArg {
    Python,
    Shell,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) the memory-refinement training loop.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a system over the test split and write an eval report.
    Eval {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        overrides: Overrides,
        /// What to evaluate. `matrix` needs --memory.
        #[arg(long, value_enum, default_value_t = MethodArg::Matrix)]
        method: MethodArg,
        /// Trained memory file (memory/epoch_k.json from a run directory).
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Consult the judge model when exact matching fails.
        #[arg(long)]
        judge: bool,
        /// Output directory (default: under the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one comparison baseline over the test split.
    Baseline {
        #[command(flatten)]
        source: ConfigSource,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_enum)]
        method: BaselineArg,
        /// Consult the judge model when exact matching fails.
        #[arg(long)]
        judge: bool,
        /// Output directory (default: under the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export CSV time series and histograms from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory (default: <run-dir>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus manifest (and optionally the scripted
    /// rulebook that makes it fully learnable offline).
    GenSynthetic {
        /// Number of pattern families (1..=16).
        #[arg(long, default_value_t = 4)]
        families: usize,
        /// Instances per family.
        #[arg(long, default_value_t = 10)]
        per_family: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Manifest output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the matching scripted rulebook here.
        #[arg(long)]
        rulebook: Option<PathBuf>,
        /// Script language the rulebook's extraction snippets use.
        #[arg(long, value_enum, default_value_t = FlavorArg::Python)]
        flavor: FlavorArg,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { source, overrides } => {
            let config = source.load(&overrides)?;
            let interrupt = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&interrupt);
            ctrlc::set_handler(move || {
                eprintln!("interrupt received; stopping at the next epoch boundary");
                flag.store(true, Ordering::Relaxed);
            })
            .context("cannot install interrupt handler")?;
            commands::cmd_train(&config, &interrupt)
        }
        Command::Eval {
            source,
            overrides,
            method,
            memory,
            judge,
            out,
        } => {
            let config = source.load(&overrides)?;
            commands::cmd_eval(&config, method.eval_method(), memory.as_deref(), judge, out)
        }
        Command::Baseline {
            source,
            overrides,
            method,
            judge,
            out,
        } => {
            let config = source.load(&overrides)?;
            commands::cmd_eval(
                &config,
                EvalMethod::Baseline(method.method()),
                None,
                judge,
                out,
            )
        }
        Command::Report { run_dir, out } => commands::cmd_report(&run_dir, out),
        Command::GenSynthetic {
            families,
            per_family,
            seed,
            out,
            rulebook,
            flavor,
        } => commands::cmd_gen_synthetic(
            families,
            per_family,
            seed,
            &out,
            rulebook.as_deref(),
            match flavor {
                FlavorArg::Python => ScriptFlavor::Python,
                FlavorArg::Shell => ScriptFlavor::Shell,
            },
        ),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
