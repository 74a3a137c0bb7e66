use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod eval;
mod export;
mod manifest;
mod sweep;
mod train;

/// Train, evaluate and compare perception-aware policy optimization runs.
#[derive(Parser, Debug)]
#[command(name = "percept-rl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write its manifest, metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh prompts.
    Eval(EvalArgs),
    /// Train one run per value of a config key.
    Sweep(SweepArgs),
    /// Convert a run's metrics to CSV.
    Export(ExportArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `objective.gamma=0.04`. Repeatable; the
    /// last write to a key wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Run directory. Defaults to `$PERCEPT_RL_OUT/<algorithm>-seed<N>`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Root for default run directories.
    #[arg(long, env = "PERCEPT_RL_OUT", hide_env_values = true)]
    out_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Task and mask settings. Defaults to the `config.toml` of the run that
    /// holds the checkpoint, if any.
    #[command(flatten)]
    config: ConfigArgs,

    /// Prompts per dependency level.
    #[arg(long, default_value_t = 500)]
    episodes: usize,

    /// Samples per prompt.
    #[arg(long, default_value_t = 8)]
    k: usize,

    #[arg(long, default_value_t = 1.0)]
    temperature: f64,

    /// Decode greedily.
    #[arg(long)]
    greedy: bool,

    /// Dependency levels to evaluate.
    #[arg(long, value_enum, default_value_t = DependencyArg::All)]
    dependency: DependencyArg,

    /// Write the summary as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DependencyArg {
    All,
    Low,
    Medium,
    High,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Dotted config key to vary, e.g. `objective.gamma`.
    #[arg(long)]
    axis: String,

    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,

    /// Parent directory of the per-point run directories.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, env = "PERCEPT_RL_OUT", hide_env_values = true)]
    out_root: Option<PathBuf>,

    /// Points trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directory holding `manifest.json`.
    #[arg(long)]
    run: PathBuf,

    #[arg(long, value_enum)]
    what: ExportKind,

    /// Output file. Defaults to `metrics.csv` or `curves.csv` in the run.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Smoothing window for curves.
    #[arg(long, default_value_t = 20)]
    window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportKind {
    MetricsCsv,
    Curves,
}

impl ConfigArgs {
    /// The config file (or defaults, or `fallback` when given and no file is
    /// named) with `--seed` and then every `--set` applied.
    fn resolve(&self, fallback: Option<&std::path::Path>) -> Result<percept_core::TrainConfig> {
        let base = match self.config.as_deref().or(fallback) {
            Some(p) => percept_core::TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => percept_core::TrainConfig::default(),
        };
        let mut overrides = Vec::new();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.extend(self.set.iter().cloned());
        let cfg = base.with_overrides(&overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => train::cmd(a),
        Command::Eval(a) => eval::cmd(a),
        Command::Sweep(a) => sweep::cmd(a),
        Command::Export(a) => export::cmd(a),
    }
}
