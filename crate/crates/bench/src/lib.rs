//! Fixtures for the criterion benchmarks in `benches/`.

use percept_core::config::MaskConfig;
use percept_core::environment::generate_task;
use percept_core::objectives::group_advantages;
use percept_core::policy::Batch;
use percept_core::trainer::{rollout_group, RolloutSpec};
use percept_core::{Algorithm, ObjectiveConfig, PolicyParams, Prompt, RngStream, TrainConfig};

/// Default-sized policy, one prompt, and a batch of `groups` rollout groups
/// with mixed rewards.
pub struct Fixture {
    pub params: PolicyParams,
    pub prompt: Prompt,
    pub batch: Batch,
    pub objective: ObjectiveConfig,
}

impl Fixture {
    pub fn new(algorithm: Algorithm, groups: usize) -> Self {
        let cfg = TrainConfig::preset(algorithm);
        let root = RngStream::new(1);
        let params = PolicyParams::init(cfg.arch, root.derive("init"), cfg.trainer.init_scale).unwrap();
        let mask = MaskConfig::default();
        let spec = RolloutSpec {
            reference: &params,
            mask: &mask,
            group_size: cfg.trainer.group_size,
            temperature: 1.0,
        };
        let mut batch = Batch::default();
        for i in 0..groups {
            let prompt = generate_task(&cfg.env, root.derive_indexed("task", i as u64)).unwrap();
            let mut g = rollout_group(&params, prompt, &spec, root.derive_indexed("rollout", i as u64)).unwrap();
            g.rewards = (0..g.rewards.len()).map(|j| (j % 2) as f64).collect();
            batch.advantages.push(group_advantages(&g, &cfg.objective).unwrap());
            batch.groups.push(g);
        }
        let prompt = generate_task(&cfg.env, root.derive("prompt")).unwrap();
        Self {
            params,
            prompt,
            batch,
            objective: cfg.objective,
        }
    }
}
