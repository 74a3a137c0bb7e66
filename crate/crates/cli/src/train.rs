use std::path::PathBuf;

use anyhow::{bail, Result};
use percept_core::monitor::detect_collapse;
use percept_core::trainer;
use percept_core::TrainConfig;

use crate::manifest::RunManifest;
use crate::TrainArgs;

pub fn cmd(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve(None)?;
    let dir = match (args.out, args.out_root) {
        (Some(out), _) => out,
        (None, Some(root)) => root.join(default_run_name(&cfg)),
        (None, None) => bail!("no run directory: pass --out or set PERCEPT_RL_OUT"),
    };
    train_into(&cfg, dir)
}

pub fn default_run_name(cfg: &TrainConfig) -> String {
    format!("{}-seed{}", cfg.objective.algorithm.name(), cfg.seed)
}

/// Writes the manifest, then trains to completion.
pub fn train_into(cfg: &TrainConfig, dir: PathBuf) -> Result<()> {
    RunManifest::new(cfg).create(&dir)?;
    let out = trainer::run(cfg, &dir)?;
    let signal = detect_collapse(&out.history, &cfg.monitor);
    let reward = out.history.last().map_or(f64::NAN, |m| m.mean_reward);
    println!(
        "{}: {} steps, last reward {reward:.4}, collapse {}, checkpoint {}",
        dir.display(),
        out.history.len(),
        if signal.fired {
            format!("at step {}", signal.at_step)
        } else {
            "not detected".into()
        },
        out.final_checkpoint.display()
    );
    Ok(())
}
