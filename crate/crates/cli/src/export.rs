use std::path::Path;

use anyhow::{Context, Result};
use percept_core::monitor::{read_metrics, running_average};
use percept_core::StepMetrics;

use crate::manifest::RunManifest;
use crate::{ExportArgs, ExportKind};

/// Fields written as integers.
const INTEGER_FIELDS: [&str; 3] = ["step", "degenerate_groups", "wall_ms"];

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cmd(args: ExportArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.run)?;
    let metrics = args.run.join(&manifest.artifacts.metrics);
    let (_, history) = read_metrics(&metrics).with_context(|| format!("reading metrics of {}", args.run.display()))?;
    let (default_name, rows) = match args.what {
        ExportKind::MetricsCsv => ("metrics.csv", metrics_rows(&history)),
        ExportKind::Curves => ("curves.csv", curve_rows(&history, args.window)),
    };
    let out = args.out.unwrap_or_else(|| args.run.join(default_name));
    write_csv(&out, &rows)?;
    println!("{} rows -> {}", rows.len() - 1, out.display());
    Ok(())
}

fn metrics_rows(history: &[StepMetrics]) -> Vec<Vec<String>> {
    let mut rows = vec![StepMetrics::FIELDS.iter().map(|f| f.to_string()).collect()];
    for m in history {
        rows.push(
            StepMetrics::FIELDS
                .iter()
                .map(|&f| {
                    let v = m.get(f).expect("listed field");
                    if INTEGER_FIELDS.contains(&f) {
                        format!("{}", v as u64)
                    } else {
                        float(v)
                    }
                })
                .collect(),
        );
    }
    rows
}

/// Step plus the running average of every floating-point series.
fn curve_rows(history: &[StepMetrics], window: usize) -> Vec<Vec<String>> {
    let fields: Vec<&str> = StepMetrics::FIELDS
        .iter()
        .copied()
        .filter(|f| !INTEGER_FIELDS.contains(f))
        .collect();
    let smoothed: Vec<Vec<f64>> = fields
        .iter()
        .map(|&f| {
            let series: Vec<f64> = history.iter().map(|m| m.get(f).expect("listed field")).collect();
            running_average(&series, window)
        })
        .collect();
    let mut header = vec!["step".to_string()];
    header.extend(fields.iter().map(|f| f.to_string()));
    let mut rows = vec![header];
    for (i, m) in history.iter().enumerate() {
        let mut row = vec![m.step.to_string()];
        row.extend(smoothed.iter().map(|s| float(s[i])));
        rows.push(row);
    }
    rows
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
