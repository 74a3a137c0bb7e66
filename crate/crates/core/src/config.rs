//! Run configuration: TOML sections, dotted overrides, validation.
//!
//! A config file has one optional top-level key and five tables:
//!
//! ```toml
//! seed = 0
//!
//! [objective]   # ObjectiveConfig
//! [mask]        # MaskConfig
//! [env]         # TaskSpec
//! [trainer]     # TrainerConfig
//! [arch]        # ArchConfig
//! [monitor]     # CollapseRules
//! ```
//!
//! Every table and key is optional; missing values take their defaults.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environment::TaskSpec;
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::monitor::CollapseRules;
use crate::objectives::{Algorithm, ObjectiveConfig};
use crate::policy::ArchConfig;

/// How often a fresh corrupted image is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// One mask per prompt per step, shared by the whole group.
    #[default]
    PerPrompt,
    /// An independent mask for every response.
    PerRollout,
}

/// Where semantic masking takes its patch saliency from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    /// The generator's task-relevant cells.
    #[default]
    Oracle,
    /// Column sums of the rollout policy's attention.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub granularity: MaskGranularity,
    pub saliency: SaliencySource,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Random,
            ratio: 0.6,
            granularity: MaskGranularity::PerPrompt,
            saliency: SaliencySource::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicSampling {
    pub enabled: bool,
    /// Regenerations allowed after the first attempt.
    pub max_retries: u32,
}

impl Default for DynamicSampling {
    fn default() -> Self {
        Self {
            enabled: false,
            max_retries: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Responses per prompt (G).
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub steps: u64,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Rescale the gradient to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
    /// Sampling temperature of rollouts.
    pub temperature: f64,
    pub dynamic_sampling: DynamicSampling,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
    /// Write a checkpoint every this many steps; 0 writes only the initial and
    /// final ones.
    pub checkpoint_every: u64,
    /// Record wall-clock time in metrics. Off by default so that metrics files
    /// are byte-identical across reruns.
    pub record_wall_time: bool,
    /// Replay prompts from a task dump instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_dump: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            prompts_per_step: 32,
            steps: 300,
            lr: 3e-3,
            optimizer: OptimizerConfig::default(),
            grad_clip: 0.0,
            temperature: 1.0,
            dynamic_sampling: DynamicSampling::default(),
            init_scale: 0.3,
            checkpoint_every: 0,
            record_wall_time: false,
            task_dump: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub mask: MaskConfig,
    pub env: TaskSpec,
    pub trainer: TrainerConfig,
    pub arch: ArchConfig,
    pub monitor: CollapseRules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Algorithm::PapoGrpo)
    }
}

impl TrainConfig {
    /// Defaults with the objective preset for `algorithm` and dynamic
    /// sampling switched on for the DAPO family.
    pub fn preset(algorithm: Algorithm) -> Self {
        let mut trainer = TrainerConfig::default();
        trainer.dynamic_sampling.enabled = algorithm.is_dapo_family();
        Self {
            seed: 0,
            objective: ObjectiveConfig::preset(algorithm),
            mask: MaskConfig::default(),
            env: TaskSpec::default(),
            trainer,
            arch: ArchConfig::default(),
            monitor: CollapseRules::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        self.objective.validate()?;
        self.arch.validate()?;
        self.env.validate(self.arch.max_answer_len)?;
        if self.env.num_patches() > self.arch.n_max {
            return fail(format!(
                "env grid has {} patches but arch.n_max is {}",
                self.env.num_patches(),
                self.arch.n_max
            ));
        }
        let t = &self.trainer;
        if t.group_size < 2 {
            return fail(format!("trainer.group_size must be >= 2, got {}", t.group_size));
        }
        if t.prompts_per_step == 0 {
            return fail("trainer.prompts_per_step must be >= 1".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return fail(format!("trainer.lr must be finite and >= 0, got {}", t.lr));
        }
        if !(t.grad_clip.is_finite() && t.grad_clip >= 0.0) {
            return fail(format!("trainer.grad_clip must be finite and >= 0, got {}", t.grad_clip));
        }
        if !(t.temperature.is_finite() && t.temperature > 0.0) {
            return fail(format!("trainer.temperature must be > 0, got {}", t.temperature));
        }
        if !(t.init_scale.is_finite() && t.init_scale >= 0.0) {
            return fail(format!("trainer.init_scale must be >= 0, got {}", t.init_scale));
        }
        let o = &t.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return fail("trainer.optimizer needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        let dapo = self.objective.algorithm.is_dapo_family();
        if t.dynamic_sampling.enabled != dapo {
            return fail(format!(
                "trainer.dynamic_sampling.enabled must be {dapo} for {}",
                self.objective.algorithm.name()
            ));
        }
        if t.dynamic_sampling.enabled && t.dynamic_sampling.max_retries < 1 {
            return fail("trainer.dynamic_sampling.max_retries must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask.ratio) {
            return fail(format!("mask.ratio must lie in [0, 1], got {}", self.mask.ratio));
        }
        let m = &self.monitor;
        if m.window == 0 || m.slope_window < 2 {
            return fail("monitor.window must be >= 1 and monitor.slope_window >= 2".into());
        }
        Ok(())
    }

    /// Parses TOML text; does not validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(value)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides in order and re-parses the result.
    ///
    /// Values are read as TOML literals, falling back to a bare string, so
    /// `objective.algorithm=dapo` and `objective.gamma=0.04` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = parse_override(o.as_ref())?;
            set_path(&mut table, &key, value)?;
        }
        Self::from_table(table)
    }
}

/// Splits `a.b.c=value` into its path and a parsed TOML value.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {s:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut cur = table;
    for p in parts {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Dependency;

    #[test]
    fn presets_validate() {
        for a in Algorithm::ALL {
            let c = TrainConfig::preset(a);
            c.validate().unwrap();
            assert_eq!(c.trainer.dynamic_sampling.enabled, a.is_dapo_family());
            assert_eq!(c.trainer.group_size, 5);
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::preset(Algorithm::PapoDapo);
        c.seed = 17;
        c.objective.gamma = 0.1 + 0.2;
        c.env.dependency = Dependency::Medium;
        c.trainer.task_dump = Some("tasks.jsonl".into());
        let text = c.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = TrainConfig::from_toml_str("seed = 3\n[objective]\nalgorithm = \"grpo\"\ngamma = 0.0\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.objective.algorithm, Algorithm::Grpo);
        assert_eq!(c.objective.beta, 0.01);
        assert_eq!(c.mask.ratio, 0.6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            TrainConfig::from_toml_str("[objective]\ngama = 0.1\n"),
            Err(Error::Config(_))
        ));
        let c = TrainConfig::default();
        assert!(c.with_overrides(&["objective.gama=0.1"]).is_err());
        assert!(c.with_overrides(&["nosuch.key=1"]).is_err());
        assert!(c.with_overrides(&["objective"]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "objective.gamma=0.04",
                "mask.strategy=semantic",
                "trainer.lr=1",
                "trainer.optimizer.kind=adam",
                "objective.gamma=0.05",
            ])
            .unwrap();
        assert_eq!(c.objective.gamma, 0.05);
        assert_eq!(c.mask.strategy, MaskStrategy::Semantic);
        assert_eq!(c.trainer.lr, 1.0);
        assert_eq!(c.trainer.optimizer.kind, OptimizerKind::Adam);
    }

    #[test]
    fn clip_higher_violation_names_eps_h() {
        let c = TrainConfig::default()
            .with_overrides(&["objective.eps_h=0.1", "objective.eps_l=0.2"])
            .unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("eps_h"), "{msg}");
    }

    #[test]
    fn structural_invariants() {
        let bad = |o: &str| TrainConfig::default().with_overrides(&[o]).unwrap().validate().is_err();
        assert!(bad("trainer.group_size=1"));
        assert!(bad("trainer.dynamic_sampling.enabled=true"));
        assert!(bad("mask.ratio=1.5"));
        assert!(bad("env.width=9"));
        let dapo = TrainConfig::preset(Algorithm::Dapo);
        assert!(dapo.with_overrides(&["trainer.dynamic_sampling.enabled=false"]).unwrap().validate().is_err());
        assert!(dapo.with_overrides(&["trainer.dynamic_sampling.max_retries=0"]).unwrap().validate().is_err());
    }
}
