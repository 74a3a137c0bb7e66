//! Loss kernels for GRPO, DAPO and their perception-aware variants.
//!
//! Every objective is a weighted token sum
//!
//! ```text
//! J = Σ_i Σ_t w_it · { min(r·A, clip(r, 1-ε_l, 1+ε_h)·A)
//!                      - β·k3(π_ref/π_θ)
//!                      + γ·k3(π_θ(·|I) / π_θ(·|I_mask))
//!                      + s·η₁·log π_θ(o_t|I) + s·η₂·log π_θ(o_t|I_mask) }
//! ```
//!
//! with `k3(x) = x - ln x - 1`. The GRPO family uses response-level weights
//! `w_it = 1 / (n_responses · |o_i|)`; the DAPO family uses token-level weights
//! `w_it = 1 / Σ_i |o_i|`. The returned loss is `-J`. `s` is `+1` under the
//! default [`EntropySign::Confidence`] convention (rewarding confident
//! sequences) and `-1` under [`EntropySign::Literal`].
//!
//! Alongside the value, [`batch_loss`] returns the adjoint `∂loss/∂logp` for
//! the current-policy and masked-policy tables, which the policy module chains
//! through its backward pass.

use serde::{Deserialize, Serialize};

use crate::domain::RolloutGroup;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    Dapo,
    PapoGrpo,
    PapoDapo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Grpo,
        Algorithm::Dapo,
        Algorithm::PapoGrpo,
        Algorithm::PapoDapo,
    ];

    /// Token-level averaging, no reference KL, dynamic sampling.
    pub fn is_dapo_family(self) -> bool {
        matches!(self, Algorithm::Dapo | Algorithm::PapoDapo)
    }

    /// Uses the perception KL and entropy terms.
    pub fn is_perception_aware(self) -> bool {
        matches!(self, Algorithm::PapoGrpo | Algorithm::PapoDapo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
            Algorithm::PapoGrpo => "papo_grpo",
            Algorithm::PapoDapo => "papo_dapo",
        }
    }
}

/// Sign applied to the two sequence log-probability regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `+η·log π`: maximizing the objective sharpens both policies.
    #[default]
    Confidence,
    /// `-η·log π`, the formula read verbatim; pushes entropy up.
    Literal,
}

impl EntropySign {
    fn factor(self) -> f64 {
        match self {
            EntropySign::Confidence => 1.0,
            EntropySign::Literal => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub algorithm: Algorithm,
    /// Weight of the perception KL.
    pub gamma: f64,
    /// Weight of the reference KL penalty.
    pub beta: f64,
    /// Regularizer weight on the original-image policy.
    pub eta1: f64,
    /// Regularizer weight on the masked-image policy.
    pub eta2: f64,
    pub eps_l: f64,
    pub eps_h: f64,
    /// Lower bound on the group standard deviation in advantage normalization.
    pub std_floor: f64,
    /// Let gradients flow through the masked-image branch.
    pub mask_branch_grad: bool,
    pub entropy_sign: EntropySign,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::preset(Algorithm::PapoGrpo)
    }
}

impl ObjectiveConfig {
    /// Default coefficients per algorithm for the small-model setting.
    pub fn preset(algorithm: Algorithm) -> Self {
        let base = Self {
            algorithm,
            gamma: 0.0,
            beta: 0.0,
            eta1: 0.0,
            eta2: 0.0,
            eps_l: 0.2,
            eps_h: 0.3,
            std_floor: 1e-6,
            mask_branch_grad: false,
            entropy_sign: EntropySign::Confidence,
        };
        match algorithm {
            Algorithm::Grpo => Self { beta: 0.01, ..base },
            Algorithm::PapoGrpo => Self {
                gamma: 0.02,
                beta: 0.01,
                ..base
            },
            Algorithm::Dapo => Self { eps_h: 0.28, ..base },
            Algorithm::PapoDapo => Self {
                gamma: 0.01,
                eta1: 0.03,
                eta2: 0.03,
                eps_h: 0.28,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        for (name, v) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("objective.{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("eps_l", self.eps_l), ("eps_h", self.eps_h)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("objective.{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.eps_h < self.eps_l {
            return fail(format!(
                "clip-higher requires objective.eps_h >= objective.eps_l ({} < {})",
                self.eps_h, self.eps_l
            ));
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return fail(format!("objective.std_floor must be > 0, got {}", self.std_floor));
        }
        if self.algorithm.is_dapo_family() && self.beta != 0.0 {
            return fail(format!(
                "{} has no reference KL; objective.beta must be 0, got {}",
                self.algorithm.name(),
                self.beta
            ));
        }
        if !self.algorithm.is_perception_aware()
            && (self.gamma != 0.0 || self.eta1 != 0.0 || self.eta2 != 0.0)
        {
            return fail(format!(
                "{} uses no perception terms; objective.gamma, eta1, eta2 must be 0",
                self.algorithm.name()
            ));
        }
        Ok(())
    }

    /// Coefficients actually applied: `(beta, gamma, eta1, eta2)`.
    fn effective(&self) -> (f64, f64, f64, f64) {
        let beta = if self.algorithm.is_dapo_family() {
            0.0
        } else {
            self.beta
        };
        if self.algorithm.is_perception_aware() {
            (beta, self.gamma, self.eta1, self.eta2)
        } else {
            (beta, 0.0, 0.0, 0.0)
        }
    }
}

/// Objective terms of one loss evaluation, each already token-averaged.
///
/// `total` is the loss (negated objective); the other fields carry the sign
/// they have inside the objective, except `kl_ref` and `kl_prcp` which are the
/// raw (nonnegative) divergence estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub surrogate: f64,
    pub kl_ref: f64,
    pub kl_prcp: f64,
    pub ent_pi: f64,
    pub ent_mask: f64,
    pub clip_high_fraction: f64,
}

impl LossBreakdown {
    /// Recombines the parts with the configured coefficients.
    pub fn recombine(&self, cfg: &ObjectiveConfig) -> f64 {
        let (beta, gamma, eta1, eta2) = cfg.effective();
        let s = cfg.entropy_sign.factor();
        -(self.surrogate - beta * self.kl_ref
            + gamma * self.kl_prcp
            + s * eta1 * self.ent_pi
            + s * eta2 * self.ent_mask)
    }
}

/// Z-scores rewards within a group using the population standard deviation,
/// floored at `std_floor`.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "need at least 2 rewards to normalize, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Advantages for one group under the configured algorithm.
///
/// The GRPO family floors the standard deviation, so zero-variance groups get
/// all-zero advantages. The DAPO family rejects such groups.
pub fn group_advantages(group: &RolloutGroup, cfg: &ObjectiveConfig) -> Result<Vec<f64>> {
    if cfg.algorithm.is_dapo_family() && !group.is_mixed() {
        return Err(Error::Constraint(format!(
            "{} correct of {}: dynamic sampling requires 0 < #correct < G",
            group.num_correct(),
            group.size()
        )));
    }
    normalize_advantages(&group.rewards, cfg.std_floor)
}

/// One evaluated clipped-surrogate term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedTerm {
    pub value: f64,
    /// Ratio above `1 + eps_h` with positive advantage.
    pub clipped_high: bool,
    /// `∂value/∂ratio`; zero when the clipped constant branch is selected.
    pub slope: f64,
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_l: f64, eps_h: f64) -> Result<ClippedTerm> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Domain(format!("importance ratio must be > 0, got {ratio}")));
    }
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_l, 1.0 + eps_h) * advantage;
    let (value, slope) = if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    };
    Ok(ClippedTerm {
        value,
        clipped_high: ratio > 1.0 + eps_h && advantage > 0.0,
        slope,
    })
}

/// `ratio - ln(ratio) - 1`, the nonnegative k3 divergence estimator.
pub fn kl_k3(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0) {
        return Err(Error::Domain(format!("k3 estimator needs ratio > 0, got {ratio}")));
    }
    Ok(ratio - ratio.ln() - 1.0)
}

/// Per-token `exp(logp_new - logp_mask)`.
pub fn perception_ratios(logp_new: &[f64], logp_mask: &[f64]) -> Result<Vec<f64>> {
    if logp_new.len() != logp_mask.len() {
        return Err(Error::Shape(format!(
            "perception ratio inputs differ in length: {} vs {}",
            logp_new.len(),
            logp_mask.len()
        )));
    }
    Ok(logp_new
        .iter()
        .zip(logp_mask)
        .map(|(a, b)| (a - b).exp())
        .collect())
}

/// Mean per-token log-probability of a sequence.
pub fn sequence_entropy_term(logp: &[f64]) -> Result<f64> {
    if logp.is_empty() {
        return Err(Error::Shape("entropy term of an empty sequence".into()));
    }
    Ok(logp.iter().sum::<f64>() / logp.len() as f64)
}

/// `Σ p_x ln(p_x / q_x)` by full enumeration.
pub fn exact_kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape("distributions must be nonempty and equal-sized".into()));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("{name} has nonpositive mass")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
        }
    }
    Ok(p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum())
}

/// Loss value plus adjoints `∂loss/∂logp` indexed `[group][response][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub d_logp_new: Vec<Vec<Vec<f64>>>,
    pub d_logp_mask: Vec<Vec<Vec<f64>>>,
}

/// GRPO / PAPO-GRPO loss of a single group.
pub fn papo_grpo_loss(
    group: &RolloutGroup,
    advantages: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    require_family(cfg, false)?;
    let adv = [advantages.to_vec()];
    Ok(evaluate(std::slice::from_ref(group), &adv, cfg)?.breakdown)
}

/// DAPO / PAPO-DAPO loss over a batch of groups.
pub fn papo_dapo_loss(
    groups: &[RolloutGroup],
    advantages: &[Vec<f64>],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    require_family(cfg, true)?;
    Ok(evaluate(groups, advantages, cfg)?.breakdown)
}

/// Loss and adjoints for a batch under `cfg.algorithm`.
///
/// GRPO-family batches average response-level means over every response in
/// the batch; DAPO-family batches average over every token in the batch and
/// require each group to be mixed.
pub fn batch_loss(
    groups: &[RolloutGroup],
    advantages: &[Vec<f64>],
    cfg: &ObjectiveConfig,
) -> Result<LossEval> {
    evaluate(groups, advantages, cfg)
}

fn require_family(cfg: &ObjectiveConfig, dapo: bool) -> Result<()> {
    if cfg.algorithm.is_dapo_family() != dapo {
        return Err(Error::Unsupported(format!(
            "{} loss called with algorithm {}",
            if dapo { "dapo" } else { "grpo" },
            cfg.algorithm.name()
        )));
    }
    Ok(())
}

fn finite(v: f64, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(term))
    }
}

fn evaluate(groups: &[RolloutGroup], advantages: &[Vec<f64>], cfg: &ObjectiveConfig) -> Result<LossEval> {
    if groups.len() != advantages.len() {
        return Err(Error::Shape(format!(
            "{} groups but {} advantage rows",
            groups.len(),
            advantages.len()
        )));
    }
    let token_level = cfg.algorithm.is_dapo_family();
    let mut n_responses = 0usize;
    let mut n_tokens = 0usize;
    for (g, (group, adv)) in groups.iter().zip(advantages).enumerate() {
        group.validate()?;
        if adv.len() != group.size() {
            return Err(Error::Shape(format!(
                "group {g}: {} advantages for {} responses",
                adv.len(),
                group.size()
            )));
        }
        if token_level && !group.is_mixed() {
            return Err(Error::Constraint(format!(
                "group {g} has {} correct of {}; requires 0 < #correct < G",
                group.num_correct(),
                group.size()
            )));
        }
        n_responses += group.size();
        n_tokens += group.num_tokens();
    }
    if n_responses == 0 {
        return Err(Error::Shape("loss over an empty batch".into()));
    }

    let (beta, gamma, eta1, eta2) = cfg.effective();
    let sign = cfg.entropy_sign.factor();
    let mut parts = LossBreakdown::default();
    let mut clipped_high = 0usize;
    let mut d_new = Vec::with_capacity(groups.len());
    let mut d_mask = Vec::with_capacity(groups.len());

    for (group, adv) in groups.iter().zip(advantages) {
        let mut gn = Vec::with_capacity(group.size());
        let mut gm = Vec::with_capacity(group.size());
        for i in 0..group.size() {
            let len = group.responses[i].len();
            let w = if token_level {
                1.0 / n_tokens as f64
            } else {
                1.0 / (n_responses as f64 * len as f64)
            };
            let a = adv[i];
            let mut rn = Vec::with_capacity(len);
            let mut rm = Vec::with_capacity(len);
            for t in 0..len {
                let new = group.logp_new[i][t];
                let ratio = finite((new - group.logp_old[i][t]).exp(), "surrogate ratio")?;
                let surr = clipped_surrogate(ratio, a, cfg.eps_l, cfg.eps_h)?;
                clipped_high += surr.clipped_high as usize;

                // k3(π_ref/π_θ): d/d(logp_new) = 1 - ρ
                let rho = finite((group.logp_ref[i][t] - new).exp(), "reference kl")?;
                let kl_ref = finite(kl_k3(rho)?, "reference kl")?;

                // k3(π_θ/π_mask): d/d(logp_new) = r - 1, d/d(logp_mask) = 1 - r
                let r = finite((new - group.logp_mask[i][t]).exp(), "perception kl")?;
                let kl_prcp = finite(kl_k3(r)?, "perception kl")?;

                parts.surrogate += w * surr.value;
                parts.kl_ref += w * kl_ref;
                parts.kl_prcp += w * kl_prcp;
                parts.ent_pi += w * new;
                parts.ent_mask += w * group.logp_mask[i][t];

                let dj_new = surr.slope * ratio - beta * (1.0 - rho) + gamma * (r - 1.0) + sign * eta1;
                let dj_mask = gamma * (1.0 - r) + sign * eta2;
                rn.push(-w * dj_new);
                rm.push(-w * dj_mask);
            }
            gn.push(rn);
            gm.push(rm);
        }
        d_new.push(gn);
        d_mask.push(gm);
    }
    parts.clip_high_fraction = clipped_high as f64 / n_tokens as f64;
    parts.total = finite(parts.recombine(cfg), "loss total")?;
    Ok(LossEval {
        breakdown: parts,
        d_logp_new: d_new,
        d_logp_mask: d_mask,
    })
}
