//! Per-step diagnostics, smoothing, and collapse detection.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{vocab, Prompt, TokenSeq};
use crate::error::{Error, Result};
use crate::objectives::LossBreakdown;

/// Diagnostics of one training step.
///
/// Entropies are reported in the usual orientation (higher = more uncertain):
/// the negative mean log-probability per sampled token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub kl_prcp_mean: f64,
    pub kl_ref_mean: f64,
    pub entropy_pi: f64,
    pub entropy_pi_mask: f64,
    pub clip_high_frac: f64,
    pub loss_total: f64,
    pub loss_surrogate: f64,
    pub loss_kl_ref: f64,
    pub loss_kl_prcp: f64,
    pub loss_ent_pi: f64,
    pub loss_ent_mask: f64,
    pub degenerate_groups: u64,
    pub wall_ms: u64,
    pub relatedness_proxy: f64,
}

impl StepMetrics {
    /// Field names in record order; used as the CSV header.
    pub const FIELDS: [&'static str; 16] = [
        "step",
        "mean_reward",
        "kl_prcp_mean",
        "kl_ref_mean",
        "entropy_pi",
        "entropy_pi_mask",
        "clip_high_frac",
        "loss_total",
        "loss_surrogate",
        "loss_kl_ref",
        "loss_kl_prcp",
        "loss_ent_pi",
        "loss_ent_mask",
        "degenerate_groups",
        "wall_ms",
        "relatedness_proxy",
    ];

    pub fn set_loss(&mut self, b: &LossBreakdown) {
        self.loss_total = b.total;
        self.loss_surrogate = b.surrogate;
        self.loss_kl_ref = b.kl_ref;
        self.loss_kl_prcp = b.kl_prcp;
        self.loss_ent_pi = b.ent_pi;
        self.loss_ent_mask = b.ent_mask;
        self.clip_high_frac = b.clip_high_fraction;
    }

    /// Value of a named numeric field.
    pub fn get(&self, field: &str) -> Option<f64> {
        Some(match field {
            "step" => self.step as f64,
            "mean_reward" => self.mean_reward,
            "kl_prcp_mean" => self.kl_prcp_mean,
            "kl_ref_mean" => self.kl_ref_mean,
            "entropy_pi" => self.entropy_pi,
            "entropy_pi_mask" => self.entropy_pi_mask,
            "clip_high_frac" => self.clip_high_frac,
            "loss_total" => self.loss_total,
            "loss_surrogate" => self.loss_surrogate,
            "loss_kl_ref" => self.loss_kl_ref,
            "loss_kl_prcp" => self.loss_kl_prcp,
            "loss_ent_pi" => self.loss_ent_pi,
            "loss_ent_mask" => self.loss_ent_mask,
            "degenerate_groups" => self.degenerate_groups as f64,
            "wall_ms" => self.wall_ms as f64,
            "relatedness_proxy" => self.relatedness_proxy,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for f in Self::FIELDS {
            let v = self.get(f).expect("listed field");
            if !v.is_finite() {
                return Err(Error::numeric(format!("metric {f}")));
            }
        }
        if !(0.0..=1.0).contains(&self.clip_high_frac) {
            return Err(Error::Validation(format!("clip_high_frac {} outside [0,1]", self.clip_high_frac)));
        }
        Ok(())
    }
}

/// Trailing mean over `min(window, i+1)` points.
pub fn running_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        let n = (i + 1).min(window);
        // recompute exactly once the window is full to avoid drift
        let v = if i >= window {
            series[i + 1 - window..=i].iter().sum::<f64>() / n as f64
        } else {
            sum / n as f64
        };
        out.push(v);
    }
    out
}

/// Least-squares slope of `y` against its index.
fn ols_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseRules {
    /// Smoothing window applied to every series.
    pub window: usize,
    /// Perception KL must fall below this fraction of its running peak.
    pub tau_p: f64,
    /// Reward must fall below this fraction of its running peak.
    pub tau_r: f64,
    /// Minimum entropy slope per step.
    pub tau_e: f64,
    /// Number of trailing steps in the slope fit.
    pub slope_window: usize,
}

impl Default for CollapseRules {
    fn default() -> Self {
        Self {
            window: 20,
            tau_p: 0.25,
            tau_r: 0.6,
            tau_e: 1e-4,
            slope_window: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollapseEvidence {
    pub prcp_drop: bool,
    pub reward_drop: bool,
    pub clip_high_rise: bool,
    pub entropy_pi_rise: bool,
    pub entropy_mask_rise: bool,
}

impl CollapseEvidence {
    pub fn fires(&self) -> bool {
        self.prcp_drop && self.reward_drop && (self.entropy_pi_rise || self.entropy_mask_rise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseSignal {
    pub fired: bool,
    /// Step of the first firing, or the last step evaluated.
    pub at_step: u64,
    pub evidence: CollapseEvidence,
}

/// Smoothed series used by the detector.
#[derive(Debug, Clone)]
pub struct SmoothedHistory {
    pub kl_prcp: Vec<f64>,
    pub reward: Vec<f64>,
    pub clip_high: Vec<f64>,
    pub entropy_pi: Vec<f64>,
    pub entropy_mask: Vec<f64>,
}

impl SmoothedHistory {
    pub fn new(history: &[StepMetrics], window: usize) -> Self {
        let series = |f: fn(&StepMetrics) -> f64| {
            running_average(&history.iter().map(f).collect::<Vec<_>>(), window)
        };
        Self {
            kl_prcp: series(|m| m.kl_prcp_mean),
            reward: series(|m| m.mean_reward),
            clip_high: series(|m| m.clip_high_frac),
            entropy_pi: series(|m| m.entropy_pi),
            entropy_mask: series(|m| m.entropy_pi_mask),
        }
    }
}

/// Rule evaluation at index `t` using only points `0..=t`.
pub fn evidence_at(s: &SmoothedHistory, t: usize, rules: &CollapseRules) -> CollapseEvidence {
    let below_peak = |series: &[f64], frac: f64| {
        let peak = series[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        peak > 0.0 && series[t] < frac * peak
    };
    let lo = (t + 1).saturating_sub(rules.slope_window.max(2));
    let slope = |series: &[f64]| ols_slope(&series[lo..=t]);
    CollapseEvidence {
        prcp_drop: below_peak(&s.kl_prcp, rules.tau_p),
        reward_drop: below_peak(&s.reward, rules.tau_r),
        clip_high_rise: slope(&s.clip_high) > 0.0,
        entropy_pi_rise: slope(&s.entropy_pi) > rules.tau_e,
        entropy_mask_rise: slope(&s.entropy_mask) > rules.tau_e,
    }
}

/// First step at which the perception KL and reward have both fallen from
/// their smoothed peaks while an entropy series is rising.
pub fn detect_collapse(history: &[StepMetrics], rules: &CollapseRules) -> CollapseSignal {
    if history.is_empty() {
        return CollapseSignal {
            fired: false,
            at_step: 0,
            evidence: CollapseEvidence::default(),
        };
    }
    let s = SmoothedHistory::new(history, rules.window);
    let mut last = CollapseEvidence::default();
    for t in 0..history.len() {
        last = evidence_at(&s, t, rules);
        if last.fires() {
            return CollapseSignal {
                fired: true,
                at_step: history[t].step,
                evidence: last,
            };
        }
    }
    CollapseSignal {
        fired: false,
        at_step: history[history.len() - 1].step,
        evidence: last,
    }
}

/// Fraction of non-END response tokens drawn from the task's answer
/// vocabulary (digits plus the answer's own tokens). 0.0 for an empty answer.
pub fn relatedness_proxy(response: &TokenSeq, prompt: &Prompt) -> f64 {
    let body: Vec<_> = response.tokens().iter().filter(|&&t| t != vocab::END).collect();
    if body.is_empty() {
        return 0.0;
    }
    let related = body
        .iter()
        .filter(|&&&t| vocab::is_digit(t) || prompt.answer.tokens().contains(&t))
        .count();
    related as f64 / body.len() as f64
}

/// Header line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub header: serde_json::Value,
}

/// Append-only writer for newline-delimited metric records.
///
/// Each record is flushed and synced before `append` returns.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates the file with a header carrying `config`.
    pub fn create(path: &Path, config: &impl Serialize) -> Result<Self> {
        let mut file = File::create(path)?;
        let header = MetricsHeader {
            header: serde_json::to_value(config)?,
        };
        serde_json::to_writer(&mut file, &header)?;
        file.write_all(b"\n")?;
        file.sync_data()?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            last_step: None,
        })
    }

    /// Opens an existing file for appending, e.g. when resuming.
    pub fn append_to(path: &Path) -> Result<Self> {
        let (_, records) = read_metrics(path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            last_step: records.last().map(|m| m.step),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        let mut line = serde_json::to_vec(m)?;
        line.push(b'\n');
        let res = self.file.write_all(&line).and_then(|_| self.file.sync_data());
        res.map_err(|source| Error::Persistence {
            last_durable_step: self.last_step,
            source,
        })?;
        self.last_step = Some(m.step);
        Ok(())
    }
}

/// Reads a metrics file written by [`MetricsWriter`].
pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<StepMetrics>)> {
    let f = File::open(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{} is empty", path.display())))??;
    let header: MetricsHeader = serde_json::from_str(&first)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Dependency, GridImage, Symbol};
    use proptest::prelude::*;

    fn metrics(step: u64, reward: f64, kl: f64, ent: f64, ent_mask: f64) -> StepMetrics {
        StepMetrics {
            step,
            mean_reward: reward,
            kl_prcp_mean: kl,
            kl_ref_mean: 0.0,
            entropy_pi: ent,
            entropy_pi_mask: ent_mask,
            clip_high_frac: 0.0,
            loss_total: 0.0,
            loss_surrogate: 0.0,
            loss_kl_ref: 0.0,
            loss_kl_prcp: 0.0,
            loss_ent_pi: 0.0,
            loss_ent_mask: 0.0,
            degenerate_groups: 0,
            wall_ms: 0,
            relatedness_proxy: 1.0,
        }
    }

    #[test]
    fn running_average_examples() {
        let s = [0.3, 1.7, -2.0, 4.0];
        assert_eq!(running_average(&s, 1), s.to_vec());
        assert_eq!(running_average(&[2.5; 30], 20), vec![2.5; 30]);
        assert_eq!(running_average(&[0.0, 1.0, 0.0, 1.0], 2), vec![0.0, 0.5, 0.5, 0.5]);
        assert!(running_average(&[], 20).is_empty());
    }

    #[test]
    fn improving_run_does_not_fire() {
        let h: Vec<_> = (0..200)
            .map(|t| metrics(t, 0.1 + 0.004 * t as f64, 0.1 + 0.001 * t as f64, 2.0, 2.5))
            .collect();
        assert!(!detect_collapse(&h, &CollapseRules::default()).fired);
    }

    /// Steps 0..100 healthy, then KL 1.0 → 0.05, reward 0.8 → 0.2 and rising entropy.
    fn collapse_fixture() -> Vec<StepMetrics> {
        (0..200u64)
            .map(|t| {
                if t < 100 {
                    metrics(t, 0.8, 1.0, 1.0, 1.5)
                } else {
                    let rise = 0.01 * (t - 99) as f64;
                    metrics(t, 0.2, 0.05, 1.0 + rise, 1.5)
                }
            })
            .collect()
    }

    #[test]
    fn fires_after_transition() {
        let sig = detect_collapse(&collapse_fixture(), &CollapseRules::default());
        assert!(sig.fired);
        // With k post-transition points in the 20-step window:
        //   KL:     (20-k)·1.0 + 0.05k < 0.25·20 → k > 15.79 → k = 16
        //   reward: (20-k)·0.8 + 0.2k  < 0.6·0.8·20 → k > 10.67
        // The 16th post-transition point is step 115.
        assert_eq!(sig.at_step, 115);
        assert!(sig.evidence.prcp_drop && sig.evidence.reward_drop && sig.evidence.entropy_pi_rise);
        assert!(!sig.evidence.entropy_mask_rise);
    }

    #[test]
    fn each_rule_is_required() {
        let base = collapse_fixture();
        let rules = CollapseRules::default();

        let mut no_kl_drop = base.clone();
        no_kl_drop.iter_mut().for_each(|m| m.kl_prcp_mean = 1.0);
        let s = detect_collapse(&no_kl_drop, &rules);
        assert!(!s.fired && !s.evidence.prcp_drop && s.evidence.reward_drop);

        let mut no_reward_drop = base.clone();
        no_reward_drop.iter_mut().for_each(|m| m.mean_reward = 0.8);
        let s = detect_collapse(&no_reward_drop, &rules);
        assert!(!s.fired && s.evidence.prcp_drop && !s.evidence.reward_drop);

        let mut flat_entropy = base.clone();
        flat_entropy.iter_mut().for_each(|m| m.entropy_pi = 1.0);
        let s = detect_collapse(&flat_entropy, &rules);
        assert!(!s.fired && !s.evidence.entropy_pi_rise);

        let mut mask_entropy = flat_entropy.clone();
        for m in mask_entropy.iter_mut().filter(|m| m.step >= 100) {
            m.entropy_pi_mask = 1.5 + 0.01 * (m.step - 99) as f64;
        }
        let s = detect_collapse(&mask_entropy, &rules);
        assert!(s.fired && s.evidence.entropy_mask_rise && !s.evidence.entropy_pi_rise);

        let mut clip = base;
        for m in clip.iter_mut().filter(|m| m.step >= 100) {
            m.clip_high_frac = 0.001 * (m.step - 99) as f64;
        }
        let s = detect_collapse(&clip, &rules);
        assert!(s.fired && s.evidence.clip_high_rise);
    }

    #[test]
    fn detector_is_causal() {
        let h = collapse_fixture();
        let rules = CollapseRules::default();
        let full = SmoothedHistory::new(&h, rules.window);
        for t in [50usize, 110, 115, 150] {
            let prefix = SmoothedHistory::new(&h[..=t], rules.window);
            assert_eq!(evidence_at(&full, t, &rules), evidence_at(&prefix, t, &rules));
        }
    }

    #[test]
    fn relatedness_examples() {
        let p = Prompt::new(
            TokenSeq::new(vec![vocab::HOW, vocab::MANY, vocab::RED, vocab::QMARK]).unwrap(),
            GridImage::filled(2, 2, Symbol::EMPTY).unwrap(),
            TokenSeq::new(vec![vocab::digit(0)]).unwrap(),
            Dependency::High,
            None,
        )
        .unwrap();
        let r = |t: &[u16]| relatedness_proxy(&TokenSeq::new(t.to_vec()).unwrap(), &p);
        assert_eq!(r(&[1, 2, vocab::END]), 1.0);
        assert_eq!(r(&[vocab::HOW, vocab::MANY]), 0.0);
        assert_eq!(r(&[3, vocab::QMARK]), 0.5);
        assert_eq!(r(&[vocab::END]), 0.0);
    }

    #[test]
    fn metrics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path, &serde_json::json!({"seed": 3})).unwrap();
        let mut recs = Vec::new();
        for t in 0..5 {
            let mut m = metrics(t, 0.1 * t as f64, 1.0 / 3.0, std::f64::consts::PI, 1e-300);
            m.loss_total = -0.1 + 0.2 / 3.0;
            w.append(&m).unwrap();
            recs.push(m);
        }
        drop(w);
        let mut w = MetricsWriter::append_to(&path).unwrap();
        let extra = metrics(5, 0.7, 0.2, 0.3, 0.4);
        w.append(&extra).unwrap();
        recs.push(extra);
        let (header, back) = read_metrics(&path).unwrap();
        assert_eq!(header.header["seed"], 3);
        assert_eq!(back, recs);
    }

    proptest! {
        #[test]
        fn smoothing_matches_direct_window_mean(xs in prop::collection::vec(-10.0f64..10.0, 1..60), w in 1usize..25) {
            let s = running_average(&xs, w);
            for i in 0..xs.len() {
                let lo = (i + 1).saturating_sub(w);
                let direct = xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
                prop_assert!((s[i] - direct).abs() < 1e-9);
            }
        }
    }
}
