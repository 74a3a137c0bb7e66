//! Fixtures shared by integration tests.

#![allow(dead_code)]

use percept_core::config::MaskConfig;
use percept_core::domain::Color;
use percept_core::environment::generate_task;
use percept_core::objectives::{group_advantages, Algorithm, ObjectiveConfig};
use percept_core::policy::{loss_gradient, loss_value, ArchConfig, Batch, PolicyParams};
use percept_core::trainer::{rollout_group, RolloutSpec};
use percept_core::{RngStream, TaskSpec};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn arch() -> ArchConfig {
    ArchConfig {
        d: 4,
        h: 4,
        n_max: 9,
        ..ArchConfig::default()
    }
}

pub fn spec(constrained: bool) -> TaskSpec {
    TaskSpec {
        width: 3,
        height: 3,
        colors: vec![Color::Red, Color::Green],
        answer_range: 3,
        constrained,
        ..TaskSpec::default()
    }
}

/// Old, reference and current parameters differ so that every ratio is
/// nontrivial; rewards alternate so every group is mixed.
pub fn fixture(constrained: bool, seed: u64) -> (PolicyParams, Batch, ObjectiveConfig) {
    let root = RngStream::new(seed);
    let old = PolicyParams::init(arch(), root.derive("old"), 0.8).unwrap();
    let reference = PolicyParams::init(arch(), root.derive("ref"), 0.8).unwrap();
    let mut new = old.clone();
    let noise = PolicyParams::init(arch(), root.derive("noise"), 0.15).unwrap();
    for (v, n) in new.values_mut().iter_mut().zip(noise.values()) {
        *v += n;
    }
    let mask = MaskConfig::default();
    let rs = RolloutSpec {
        reference: &reference,
        mask: &mask,
        group_size: 4,
        temperature: 1.0,
    };
    let cfg = ObjectiveConfig::preset(Algorithm::Grpo);
    let mut batch = Batch::default();
    for i in 0..3 {
        let prompt = generate_task(&spec(constrained), root.derive_indexed("task", i)).unwrap();
        let mut g = rollout_group(&old, prompt, &rs, root.derive_indexed("rollout", i)).unwrap();
        g.rewards = vec![1.0, 0.0, 0.0, 1.0];
        batch.advantages.push(group_advantages(&g, &cfg).unwrap());
        batch.groups.push(g);
    }
    (new, batch, cfg)
}

pub fn objective(alg: Algorithm, mask_grad: bool) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::preset(alg);
    if alg.is_perception_aware() {
        // larger than the presets so the perception and entropy terms dominate
        cfg.gamma = 0.3;
        cfg.eta1 = 0.05;
        cfg.eta2 = 0.07;
    }
    cfg.mask_branch_grad = mask_grad;
    cfg
}

pub fn max_rel_error(params: &PolicyParams, batch: &Batch, cfg: &ObjectiveConfig) -> f64 {
    let analytic = loss_gradient(params, batch, cfg).unwrap().grad;
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = params.values()[i];
        p.values_mut()[i] = x + STEP;
        let up = loss_value(&p, batch, cfg).unwrap();
        p.values_mut()[i] = x - STEP;
        let down = loss_value(&p, batch, cfg).unwrap();
        p.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
