//! Rollout collection, dynamic sampling, and the on-policy update loop.
//!
//! Every random draw comes from a stream derived from the run seed by
//! position: `step/<s>/prompt/<i>/attempt/<a>`, so prompts can be collected
//! in parallel and a resumed run replays exactly.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{MaskConfig, MaskGranularity, OptimizerKind, SaliencySource, TrainConfig};
use crate::domain::{GridImage, LogpTables, Prompt, RolloutGroup, TokenSeq};
use crate::environment::{generate_task, load_task_dump, verify};
use crate::error::{Error, Result};
use crate::masking::{oracle_saliency, random_mask, saliency_from_attention, semantic_mask, MaskStrategy};
use crate::monitor::{read_metrics, relatedness_proxy, MetricsWriter, StepMetrics};
use crate::objectives::{group_advantages, kl_k3, LossBreakdown};
use crate::policy::{loss_gradient, sample_response, Batch, Decoding, PolicyParams};
use crate::rng::RngStream;

/// Builds the corrupted image for `prompt`.
pub fn corrupted_image(
    params: &PolicyParams,
    prompt: &Prompt,
    mask: &MaskConfig,
    stream: RngStream,
) -> Result<GridImage> {
    match mask.strategy {
        MaskStrategy::Random => Ok(random_mask(&prompt.image, mask.ratio, stream)?.0),
        MaskStrategy::Semantic => {
            let saliency = match mask.saliency {
                SaliencySource::Oracle => oracle_saliency(prompt)?,
                SaliencySource::Attention => {
                    let (q, img, space) = (&prompt.question, &prompt.image, prompt.answer_space());
                    let greedy = sample_response(params, q, img, space, stream, Decoding::Greedy)?;
                    let trace = params.trace(q, img, &greedy, space)?;
                    let rows = trace.attention().into_iter().map(<[f64]>::to_vec).collect();
                    saliency_from_attention(&[vec![rows]], &[0])?
                }
            };
            Ok(semantic_mask(&prompt.image, &saliency, mask.ratio)?.0)
        }
    }
}

/// What [`rollout_group`] needs besides the rollout policy.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSpec<'a> {
    pub reference: &'a PolicyParams,
    pub mask: &'a MaskConfig,
    pub group_size: usize,
    pub temperature: f64,
}

/// Samples `group_size` responses from `params_old` and fills every table.
///
/// At collection time the current and old tables are identical.
pub fn rollout_group(
    params_old: &PolicyParams,
    prompt: Prompt,
    spec: &RolloutSpec<'_>,
    stream: RngStream,
) -> Result<RolloutGroup> {
    if spec.group_size < 2 {
        return Err(Error::InvalidGroup(format!("group size must be >= 2, got {}", spec.group_size)));
    }
    let g = spec.group_size;
    let (q, img, space) = (&prompt.question, &prompt.image, prompt.answer_space());
    let decoding = Decoding::Sample {
        temperature: spec.temperature,
    };
    let responses = (0..g)
        .map(|j| sample_response(params_old, q, img, space, stream.derive_indexed("response", j as u64), decoding))
        .collect::<Result<Vec<TokenSeq>>>()?;
    let masked_images = match spec.mask.granularity {
        MaskGranularity::PerPrompt => {
            let m = corrupted_image(params_old, &prompt, spec.mask, stream.derive("mask"))?;
            vec![m; g]
        }
        MaskGranularity::PerRollout => (0..g)
            .map(|j| corrupted_image(params_old, &prompt, spec.mask, stream.derive_indexed("mask", j as u64)))
            .collect::<Result<_>>()?,
    };
    let rewards = responses.iter().map(|r| verify(&prompt.answer, r)).collect();
    let mut tables = LogpTables::default();
    for (resp, masked) in responses.iter().zip(&masked_images) {
        let old = params_old.trace(q, img, resp, space)?.logp().to_vec();
        tables.reference.push(spec.reference.trace(q, img, resp, space)?.logp().to_vec());
        tables.mask.push(params_old.trace(q, masked, resp, space)?.logp().to_vec());
        tables.new.push(old.clone());
        tables.old.push(old);
    }
    RolloutGroup::new(prompt, responses, rewards, tables, masked_images)
}

#[derive(Debug, Clone)]
pub struct Sampled {
    pub group: RolloutGroup,
    /// Regenerations after the first attempt.
    pub retries: u32,
}

/// Calls `make_group(attempt)` until it yields a mixed group.
///
/// After `max_retries` regenerations the last group is returned with its
/// `degenerate` flag set; that is an outcome, not an error.
pub fn dynamic_sample<F>(mut make_group: F, max_retries: u32) -> Result<Sampled>
where
    F: FnMut(u32) -> Result<RolloutGroup>,
{
    if max_retries < 1 {
        return Err(Error::Validation("max_retries must be >= 1".into()));
    }
    let mut attempt = 0;
    loop {
        let mut group = make_group(attempt)?;
        if group.is_mixed() {
            return Ok(Sampled { group, retries: attempt });
        }
        if attempt == max_retries {
            group.degenerate = true;
            return Ok(Sampled { group, retries: attempt });
        }
        attempt += 1;
    }
}

/// Parameters, frozen reference, optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    /// Adam first and second moments; empty under SGD.
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Completed updates.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let init = RngStream::new(cfg.seed).derive("init");
        let params = PolicyParams::init(cfg.arch, init, cfg.trainer.init_scale)?;
        let n = if cfg.trainer.optimizer.kind == OptimizerKind::Adam {
            params.len()
        } else {
            0
        };
        Ok(Self {
            reference: params.clone(),
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            arch: *self.params.arch(),
            arrays: vec![
                ("params".into(), self.params.values().to_vec()),
                ("reference".into(), self.reference.values().to_vec()),
                ("adam_m".into(), self.adam_m.clone()),
                ("adam_v".into(), self.adam_v.clone()),
            ],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        if ckpt.arch != cfg.arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, config has {:?}",
                ckpt.arch, cfg.arch
            )));
        }
        let params = ckpt.params("params")?;
        let reference = ckpt.params("reference")?;
        let adam_m = ckpt.array("adam_m")?.to_vec();
        let adam_v = ckpt.array("adam_v")?.to_vec();
        let want = if cfg.trainer.optimizer.kind == OptimizerKind::Adam {
            params.len()
        } else {
            0
        };
        if adam_m.len() != want || adam_v.len() != want {
            return Err(Error::Checkpoint("optimizer moments do not match the configured optimizer".into()));
        }
        Ok(Self {
            params,
            reference,
            adam_m,
            adam_v,
            step: ckpt.step,
        })
    }

    fn apply_update(&mut self, grad: &[f64], cfg: &TrainConfig) {
        let lr = cfg.trainer.lr;
        if lr == 0.0 {
            return;
        }
        let clip = cfg.trainer.grad_clip;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clipped: Vec<f64>;
        let grad = if clip > 0.0 && norm > clip {
            clipped = grad.iter().map(|g| g * (clip / norm)).collect();
            &clipped[..]
        } else {
            grad
        };
        let o = &cfg.trainer.optimizer;
        match o.kind {
            OptimizerKind::Sgd => {
                for (p, g) in self.params.values_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - o.beta1.powi(t);
                let c2 = 1.0 - o.beta2.powi(t);
                let values = self.params.values_mut();
                for i in 0..values.len() {
                    let g = grad[i];
                    self.adam_m[i] = o.beta1 * self.adam_m[i] + (1.0 - o.beta1) * g;
                    self.adam_v[i] = o.beta2 * self.adam_v[i] + (1.0 - o.beta2) * g * g;
                    let mh = self.adam_m[i] / c1;
                    let vh = self.adam_v[i] / c2;
                    values[i] -= lr * mh / (vh.sqrt() + o.eps);
                }
            }
        }
    }
}

/// Per-group bookkeeping of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSummary {
    pub num_correct: usize,
    pub size: usize,
    pub retries: u32,
    pub degenerate: bool,
    /// Whether the group entered the loss.
    pub in_batch: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub groups: Vec<GroupSummary>,
    /// Loss terms at the first (on-policy) evaluation.
    pub breakdown: LossBreakdown,
}

/// Owns a config, its prompt source and a [`TrainState`].
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    dump: Option<Arc<Vec<Prompt>>>,
    state: TrainState,
    root: RngStream,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, state)
    }

    pub fn with_state(cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let dump = match &cfg.trainer.task_dump {
            Some(path) => {
                let prompts = load_task_dump(path)?;
                if prompts.is_empty() {
                    return Err(Error::Validation(format!("task dump {} is empty", path.display())));
                }
                Some(Arc::new(prompts))
            }
            None => None,
        };
        let root = RngStream::new(cfg.seed);
        Ok(Self {
            cfg,
            dump,
            state,
            root,
        })
    }

    pub fn from_checkpoint(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let state = TrainState::from_checkpoint(&Checkpoint::load(path)?, &cfg)?;
        Self::with_state(cfg, state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    fn prompt(&self, step: u64, index: usize, attempt: u32, stream: RngStream) -> Result<Prompt> {
        match &self.dump {
            Some(d) => {
                let i = if attempt == 0 {
                    ((step as usize) * self.cfg.trainer.prompts_per_step + index) % d.len()
                } else {
                    stream.derive("pick").rng().random_range(0..d.len())
                };
                Ok(d[i].clone())
            }
            None => generate_task(&self.cfg.env, stream.derive("task")),
        }
    }

    fn collect(&self, index: usize) -> Result<Sampled> {
        let t = &self.cfg.trainer;
        let spec = RolloutSpec {
            reference: &self.state.reference,
            mask: &self.cfg.mask,
            group_size: t.group_size,
            temperature: t.temperature,
        };
        let step = self.state.step;
        let base = self
            .root
            .derive_indexed("step", step)
            .derive_indexed("prompt", index as u64);
        let make = |attempt: u32| {
            let s = base.derive_indexed("attempt", attempt as u64);
            let prompt = self.prompt(step, index, attempt, s)?;
            rollout_group(&self.state.params, prompt, &spec, s.derive("rollout"))
        };
        if t.dynamic_sampling.enabled {
            dynamic_sample(make, t.dynamic_sampling.max_retries)
        } else {
            Ok(Sampled {
                group: make(0)?,
                retries: 0,
            })
        }
    }

    /// Collects one batch, applies one update, and reports metrics.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let started = Instant::now();
        let step = self.state.step;
        let n = self.cfg.trainer.prompts_per_step;
        let sampled = (0..n)
            .into_par_iter()
            .map(|i| self.collect(i))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_step(step + 1))?;

        let mut batch = Batch::default();
        let mut groups = Vec::with_capacity(n);
        for s in &sampled {
            let g = &s.group;
            let in_batch = !g.degenerate;
            if in_batch {
                batch.advantages.push(group_advantages(g, &self.cfg.objective)?);
                batch.groups.push(g.clone());
            }
            groups.push(GroupSummary {
                num_correct: g.num_correct(),
                size: g.size(),
                retries: s.retries,
                degenerate: g.degenerate,
                in_batch,
            });
        }

        let breakdown = if batch.groups.is_empty() {
            LossBreakdown::default()
        } else {
            let out = loss_gradient(&self.state.params, &batch, &self.cfg.objective)
                .map_err(|e| e.at_step(step + 1))?;
            self.state.apply_update(&out.grad, &self.cfg);
            out.loss.breakdown
        };
        if let Some(bad) = self.state.params.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter {bad} after update")).at_step(step + 1));
        }
        self.state.step += 1;

        let mut metrics = collection_metrics(&sampled)?;
        metrics.step = self.state.step;
        metrics.set_loss(&breakdown);
        metrics.degenerate_groups = groups.iter().filter(|g| g.degenerate).count() as u64;
        if self.cfg.trainer.record_wall_time {
            metrics.wall_ms = started.elapsed().as_millis() as u64;
        }
        metrics.validate().map_err(|e| e.at_step(self.state.step))?;
        Ok(StepOutcome {
            metrics,
            groups,
            breakdown,
        })
    }
}

/// Token-averaged statistics of the collected groups, degenerate ones included.
fn collection_metrics(sampled: &[Sampled]) -> Result<StepMetrics> {
    let (mut reward, mut responses) = (0.0, 0usize);
    let (mut kl_prcp, mut kl_ref, mut lp, mut lp_mask, mut tokens) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut related = 0.0;
    for s in sampled {
        let g = &s.group;
        for i in 0..g.size() {
            reward += g.rewards[i];
            related += relatedness_proxy(&g.responses[i], &g.prompt);
            responses += 1;
            for t in 0..g.responses[i].len() {
                let (old, mask, reference) = (g.logp_old[i][t], g.logp_mask[i][t], g.logp_ref[i][t]);
                kl_prcp += kl_k3((old - mask).exp())?;
                kl_ref += kl_k3((reference - old).exp())?;
                lp += old;
                lp_mask += mask;
                tokens += 1;
            }
        }
    }
    let (r, t) = (responses.max(1) as f64, tokens.max(1) as f64);
    Ok(StepMetrics {
        step: 0,
        mean_reward: reward / r,
        kl_prcp_mean: kl_prcp / t,
        kl_ref_mean: kl_ref / t,
        entropy_pi: -lp / t,
        entropy_pi_mask: -lp_mask / t,
        clip_high_frac: 0.0,
        loss_total: 0.0,
        loss_surrogate: 0.0,
        loss_kl_ref: 0.0,
        loss_kl_prcp: 0.0,
        loss_ent_pi: 0.0,
        loss_ent_mask: 0.0,
        degenerate_groups: 0,
        wall_ms: 0,
        relatedness_proxy: related / r,
    })
}

/// File names inside a run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<StepMetrics>,
    pub final_checkpoint: PathBuf,
}

fn persistence(e: Error, last: Option<u64>) -> Error {
    match e {
        Error::Io(source) => Error::Persistence {
            last_durable_step: last,
            source,
        },
        other => other,
    }
}

/// Trains for `cfg.trainer.steps` steps, writing metrics and checkpoints
/// under `run_dir`.
pub fn run(cfg: &TrainConfig, run_dir: &Path) -> Result<RunOutcome> {
    let trainer = Trainer::new(cfg.clone())?;
    std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))?;
    let writer = MetricsWriter::create(&run_dir.join(METRICS_FILE), cfg)?;
    let first = checkpoint_path(run_dir, 0);
    trainer.state.to_checkpoint().save(&first).map_err(|e| persistence(e, None))?;
    drive(trainer, writer, run_dir, Vec::new(), first)
}

/// Continues a run from one of its checkpoints. Metrics recorded after the
/// checkpoint step are discarded and regenerated.
pub fn resume(cfg: &TrainConfig, run_dir: &Path, checkpoint: &Path) -> Result<RunOutcome> {
    let trainer = Trainer::from_checkpoint(cfg.clone(), checkpoint)?;
    let k = trainer.state.step;
    let path = run_dir.join(METRICS_FILE);
    let (header, mut history) = read_metrics(&path)?;
    history.retain(|m| m.step <= k);
    if history.len() as u64 != k {
        return Err(Error::Validation(format!(
            "{} holds {} records up to step {k}",
            path.display(),
            history.len()
        )));
    }
    let mut writer = MetricsWriter::create(&path, &header.header)?;
    for m in &history {
        writer.append(m)?;
    }
    drive(trainer, writer, run_dir, history, checkpoint.to_path_buf())
}

fn drive(
    mut trainer: Trainer,
    mut writer: MetricsWriter,
    run_dir: &Path,
    mut history: Vec<StepMetrics>,
    mut last_ckpt: PathBuf,
) -> Result<RunOutcome> {
    let steps = trainer.cfg.trainer.steps;
    let every = trainer.cfg.trainer.checkpoint_every;
    while trainer.state.step < steps {
        let out = trainer.step()?;
        writer.append(&out.metrics)?;
        let s = trainer.state.step;
        if s == steps || (every > 0 && s % every == 0) {
            last_ckpt = checkpoint_path(run_dir, s);
            trainer
                .state
                .to_checkpoint()
                .save(&last_ckpt)
                .map_err(|e| persistence(e, Some(s)))?;
        }
        history.push(out.metrics);
    }
    Ok(RunOutcome {
        history,
        final_checkpoint: last_ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{vocab, Dependency};
    use crate::objectives::Algorithm;
    use crate::policy::ArchConfig;

    fn small(algorithm: Algorithm) -> TrainConfig {
        let mut c = TrainConfig::preset(algorithm);
        c.arch = ArchConfig {
            d: 8,
            h: 8,
            ..ArchConfig::default()
        };
        c.trainer.prompts_per_step = 4;
        c.trainer.steps = 3;
        c.seed = 11;
        c
    }

    #[test]
    fn rollout_tables_at_collection() {
        let cfg = small(Algorithm::PapoGrpo);
        let state = TrainState::new(&cfg).unwrap();
        let prompt = generate_task(&cfg.env, RngStream::new(1)).unwrap();
        let spec = RolloutSpec {
            reference: &state.reference,
            mask: &cfg.mask,
            group_size: 5,
            temperature: 1.0,
        };
        let a = rollout_group(&state.params, prompt.clone(), &spec, RngStream::new(2)).unwrap();
        let b = rollout_group(&state.params, prompt, &spec, RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logp_new, a.logp_old);
        assert_eq!(a.logp_ref, a.logp_old);
        assert!(a.rewards.iter().all(|&r| r == 0.0 || r == 1.0));
        assert!(a.masked_images.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn per_rollout_masks_differ() {
        let mut cfg = small(Algorithm::PapoGrpo);
        cfg.mask.granularity = MaskGranularity::PerRollout;
        let state = TrainState::new(&cfg).unwrap();
        let prompt = generate_task(&cfg.env, RngStream::new(1)).unwrap();
        let spec = RolloutSpec {
            reference: &state.reference,
            mask: &cfg.mask,
            group_size: 5,
            temperature: 1.0,
        };
        let g = rollout_group(&state.params, prompt, &spec, RngStream::new(2)).unwrap();
        assert!(g.masked_images.windows(2).any(|w| w[0] != w[1]));
        assert!(rollout_group(&state.params, g.prompt.clone(), &RolloutSpec { group_size: 1, ..spec }, RngStream::new(2)).is_err());
    }

    #[test]
    fn dynamic_sample_first_mixed_and_exhaustion() {
        let cfg = small(Algorithm::Dapo);
        let state = TrainState::new(&cfg).unwrap();
        let prompt = generate_task(&cfg.env, RngStream::new(1)).unwrap();
        let spec = RolloutSpec {
            reference: &state.reference,
            mask: &cfg.mask,
            group_size: 2,
            temperature: 1.0,
        };
        let base = rollout_group(&state.params, prompt, &spec, RngStream::new(2)).unwrap();
        let with_rewards = |r: [f64; 2]| {
            let mut g = base.clone();
            g.rewards = r.to_vec();
            g
        };
        let s = dynamic_sample(|_| Ok(with_rewards([1.0, 0.0])), 20).unwrap();
        assert_eq!(s.retries, 0);
        assert!(!s.group.degenerate);

        let mut calls = 0;
        let s = dynamic_sample(
            |_| {
                calls += 1;
                Ok(with_rewards([1.0, 1.0]))
            },
            20,
        )
        .unwrap();
        assert_eq!((s.retries, calls), (20, 21));
        assert!(s.group.degenerate);

        let s = dynamic_sample(|a| Ok(with_rewards(if a == 3 { [0.0, 1.0] } else { [0.0, 0.0] })), 20).unwrap();
        assert_eq!(s.retries, 3);
        assert!(dynamic_sample(|_| Ok(with_rewards([1.0, 0.0])), 0).is_err());
    }

    #[test]
    fn lr_zero_keeps_params() {
        let mut cfg = small(Algorithm::PapoGrpo);
        cfg.trainer.lr = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.state().params.clone();
        let out = t.step().unwrap();
        assert_eq!(t.state().params, before);
        assert_eq!(out.metrics.step, 1);
    }

    #[test]
    fn on_policy_first_evaluation() {
        let mut t = Trainer::new(small(Algorithm::PapoDapo)).unwrap();
        for _ in 0..3 {
            let out = t.step().unwrap();
            assert_eq!(out.metrics.clip_high_frac, 0.0);
            for g in out.groups.iter().filter(|g| g.in_batch) {
                assert!(g.num_correct > 0 && g.num_correct < g.size);
            }
        }
    }

    #[test]
    fn steps_are_deterministic() {
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut cfg = small(Algorithm::Grpo);
            cfg.trainer.optimizer.kind = optimizer;
            let mut a = Trainer::new(cfg.clone()).unwrap();
            let mut b = Trainer::new(cfg).unwrap();
            for _ in 0..2 {
                assert_eq!(a.step().unwrap().metrics, b.step().unwrap().metrics);
            }
            assert_eq!(a.state(), b.state());
        }
    }

    #[test]
    fn checkpoint_state_round_trip() {
        let mut cfg = small(Algorithm::PapoGrpo);
        cfg.trainer.optimizer.kind = OptimizerKind::Adam;
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.step().unwrap();
        let back = TrainState::from_checkpoint(&t.state().to_checkpoint(), &cfg).unwrap();
        assert_eq!(&back, t.state());
        let mut sgd = cfg.clone();
        sgd.trainer.optimizer.kind = OptimizerKind::Sgd;
        assert!(TrainState::from_checkpoint(&t.state().to_checkpoint(), &sgd).is_err());
    }

    #[test]
    fn semantic_masks_cover_targets() {
        let mut cfg = small(Algorithm::PapoGrpo);
        cfg.mask.strategy = MaskStrategy::Semantic;
        let state = TrainState::new(&cfg).unwrap();
        let prompt = generate_task(&cfg.env, RngStream::new(4)).unwrap();
        let masked = corrupted_image(&state.params, &prompt, &cfg.mask, RngStream::new(0)).unwrap();
        let k = (cfg.mask.ratio * prompt.image.num_patches() as f64 + 1e-9).floor() as usize;
        assert_eq!(masked.count(crate::domain::Symbol::MASKED), k);
        cfg.mask.saliency = SaliencySource::Attention;
        let masked = corrupted_image(&state.params, &prompt, &cfg.mask, RngStream::new(0)).unwrap();
        assert_eq!(masked.count(crate::domain::Symbol::MASKED), k);
    }

    #[test]
    fn dump_prompts_replay_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let mut cfg = small(Algorithm::Grpo);
        cfg.env.dependency = Dependency::Low;
        let prompts: Vec<_> = (0..3)
            .map(|i| generate_task(&cfg.env, RngStream::new(i)).unwrap())
            .collect();
        crate::environment::write_task_dump(std::fs::File::create(&path).unwrap(), &prompts).unwrap();
        cfg.trainer.task_dump = Some(path);
        let t = Trainer::new(cfg).unwrap();
        let p = t.prompt(1, 1, 0, RngStream::new(0)).unwrap();
        assert_eq!(p, prompts[(4 + 1) % 3]);
        assert!(p.question.tokens().iter().any(|&x| vocab::is_digit(x)));
    }
}
