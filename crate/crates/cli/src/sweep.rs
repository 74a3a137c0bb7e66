use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Result};
use percept_core::TrainConfig;

use crate::train::train_into;
use crate::SweepArgs;

/// Fails unless `key` names an existing scalar in the config schema.
fn check_axis(cfg: &TrainConfig, key: &str) -> Result<()> {
    let value = serde_json::to_value(cfg)?;
    let pointer = format!("/{}", key.replace('.', "/"));
    match value.pointer(&pointer) {
        Some(v) if !v.is_object() => Ok(()),
        Some(_) => bail!("sweep axis {key:?} is a table, not a value"),
        None => bail!("sweep axis {key:?} is not a config key"),
    }
}

/// Directory name for one sweep point.
fn point_name(axis: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{}={clean}", axis.rsplit('.').next().unwrap_or(axis))
}

pub fn cmd(args: SweepArgs) -> Result<()> {
    let base = args.config.resolve(None)?;
    check_axis(&base, &args.axis)?;
    let parent = match (&args.out, &args.out_root) {
        (Some(out), _) => out.clone(),
        (None, Some(root)) => root.join(format!("sweep-{}", args.axis)),
        (None, None) => bail!("no output directory: pass --out or set PERCEPT_RL_OUT"),
    };

    // Resolve every point before training any, so a bad value fails fast.
    let mut points: Vec<(TrainConfig, PathBuf)> = Vec::with_capacity(args.values.len());
    for v in &args.values {
        let cfg = base.with_overrides(&[format!("{}={v}", args.axis)])?;
        cfg.validate().map_err(|e| anyhow!("{}={v}: {e}", args.axis))?;
        points.push((cfg, parent.join(point_name(&args.axis, v))));
    }
    if points.is_empty() {
        println!("sweep over {}: no values, nothing to run", args.axis);
        return Ok(());
    }
    run_points(&points, args.jobs.max(1))?;
    println!("sweep over {}: {} runs in {}", args.axis, points.len(), parent.display());
    Ok(())
}

/// Trains the points on at most `jobs` threads; reports the first failure.
fn run_points(points: &[(TrainConfig, PathBuf)], jobs: usize) -> Result<()> {
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, dir)) = points.get(i) else { break };
                if failure.lock().unwrap().is_some() {
                    break;
                }
                if let Err(e) = train_into(cfg, dir.clone()) {
                    failure.lock().unwrap().get_or_insert(e.context(describe(dir)));
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn describe(dir: &Path) -> String {
    format!("sweep point {}", dir.display())
}
