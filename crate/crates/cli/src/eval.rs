use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use percept_core::checkpoint::load_params;
use percept_core::eval::{evaluate, EvalConfig};
use percept_core::{Dependency, TaskSpec};

use crate::manifest::CONFIG_FILE;
use crate::{DependencyArg, EvalArgs};

/// `<run>/config.toml` for a checkpoint at `<run>/checkpoints/step-N.ckpt`.
fn run_config(checkpoint: &std::path::Path) -> Option<PathBuf> {
    let path = checkpoint.parent()?.parent()?.join(CONFIG_FILE);
    path.is_file().then_some(path)
}

pub fn cmd(args: EvalArgs) -> Result<()> {
    let fallback = run_config(&args.checkpoint);
    let cfg = args.config.resolve(fallback.as_deref())?;
    let params = load_params(&args.checkpoint, Some(&cfg.arch))
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let levels: Vec<Dependency> = match args.dependency {
        DependencyArg::All => Dependency::ALL.to_vec(),
        DependencyArg::Low => vec![Dependency::Low],
        DependencyArg::Medium => vec![Dependency::Medium],
        DependencyArg::High => vec![Dependency::High],
    };
    let specs: Vec<TaskSpec> = levels
        .into_iter()
        .map(|dependency| TaskSpec {
            dependency,
            ..cfg.env.clone()
        })
        .collect();
    let eval_cfg = EvalConfig {
        episodes: args.episodes,
        k: args.k,
        temperature: args.temperature,
        greedy: args.greedy,
        seed: args.config.seed.unwrap_or(0),
    };
    let summary = evaluate(&params, &specs, &cfg.mask, &eval_cfg)?;

    println!("{:<10} {:>9} {:>10} {:>12}", "dependency", "accuracy", "kl_prcp", "ratio");
    for s in &summary.per_spec {
        println!(
            "{:<10} {:>9.4} {:>10.4} {:>12.4}",
            s.dependency.to_string(),
            s.accuracy,
            s.kl_prcp_mean,
            s.mean_perception_ratio
        );
    }
    println!(
        "{:<10} {:>9.4} {:>10.4} {:>12.4}",
        "all", summary.accuracy, summary.kl_prcp_mean, summary.mean_perception_ratio
    );
    if let Some(out) = args.out {
        fs::write(&out, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
