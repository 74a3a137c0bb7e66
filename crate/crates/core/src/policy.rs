//! A small differentiable autoregressive policy over (question, image) pairs.
//!
//! Per decoding step `t` the policy computes
//!
//! ```text
//! c_t   = mean_k E_q[q_k] + Σ_{s<t} E_q[o_s]          context
//! key_j = E_sym[cell_j] + P[j]                         patch keys
//! α     = softmax_j( (W_a c_t) · key_j / √d )          attention over patches
//! x     = Σ_j α_j key_j + c_t
//! z     = tanh(W_1 x + b_1)
//! π     = softmax(W_2 z + b_2)                         over the output vocabulary
//! ```
//!
//! The gradient is written out by hand per layer (see [`SequenceTrace`] and
//! [`PolicyParams::backward`]); `tests/gradient_check.rs` holds it to central
//! finite differences.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{vocab, AnswerSpace, GridImage, RolloutGroup, Symbol, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::objectives::{batch_loss, LossEval, ObjectiveConfig};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Embedding width.
    pub d: usize,
    /// Hidden width of the dense layer.
    pub h: usize,
    /// Question-token vocabulary size.
    pub v_q: usize,
    /// Output vocabulary size.
    pub v_out: usize,
    /// Patch-symbol alphabet size.
    pub a_sym: usize,
    /// Maximum number of patches.
    pub n_max: usize,
    /// Maximum response length, including the END token.
    pub max_answer_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d: 16,
            h: 32,
            v_q: vocab::TEXT_VOCAB,
            v_out: vocab::TEXT_VOCAB,
            a_sym: Symbol::COUNT,
            n_max: 64,
            max_answer_len: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("h", self.h),
            ("v_q", self.v_q),
            ("v_out", self.v_out),
            ("a_sym", self.a_sym),
            ("n_max", self.n_max),
            ("max_answer_len", self.max_answer_len),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("arch.{name} must be positive")));
            }
        }
        if self.v_q > vocab::TEXT_VOCAB || self.v_out > vocab::TEXT_VOCAB {
            return Err(Error::Validation(format!(
                "arch vocabularies cannot exceed the {} text tokens",
                vocab::TEXT_VOCAB
            )));
        }
        if self.v_out <= vocab::END as usize {
            return Err(Error::Validation("arch.v_out must include the END token".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter block in the flat array, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    /// Patch-symbol embeddings, `a_sym × d`.
    pub sym_embed: Range<usize>,
    /// Question-token embeddings, `v_q × d`.
    pub tok_embed: Range<usize>,
    /// Patch positional embeddings, `n_max × d`.
    pub pos_embed: Range<usize>,
    /// Attention query projection, `d × d`.
    pub attn: Range<usize>,
    /// `h × d`
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    /// `v_out × h`
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    fn new(a: &ArchConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let sym_embed = take(a.a_sym * a.d);
        let tok_embed = take(a.v_q * a.d);
        let pos_embed = take(a.n_max * a.d);
        let attn = take(a.d * a.d);
        let w1 = take(a.h * a.d);
        let b1 = take(a.h);
        let w2 = take(a.v_out * a.h);
        let b2 = take(a.v_out);
        Self {
            sym_embed,
            tok_embed,
            pos_embed,
            attn,
            w1,
            b1,
            w2,
            b2,
            total: at,
        }
    }

    /// Named blocks, for diagnostics.
    pub fn blocks(&self) -> [(&'static str, Range<usize>); 8] {
        [
            ("sym_embed", self.sym_embed.clone()),
            ("tok_embed", self.tok_embed.clone()),
            ("pos_embed", self.pos_embed.clone()),
            ("attn", self.attn.clone()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
        ]
    }
}

/// Sampling mode for [`sample_response`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Sample { temperature: f64 },
    /// The zero-temperature limit: argmax with ties to the lowest index.
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: ArchConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let values = vec![0.0; layout.total];
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    /// Weights drawn from `N(0, scale²)`, biases zero.
    pub fn init(arch: ArchConfig, stream: RngStream, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let normal = Normal::new(0.0, scale)
            .map_err(|e| Error::Validation(format!("init scale {scale}: {e}")))?;
        let mut rng = stream.rng();
        let (b1, b2) = (p.layout.b1.clone(), p.layout.b2.clone());
        for (i, v) in p.values.iter_mut().enumerate() {
            if !b1.contains(&i) && !b2.contains(&i) {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: ArchConfig, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if values.len() != layout.total {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn row(&self, block: &Range<usize>, i: usize, width: usize) -> &[f64] {
        let s = block.start + i * width;
        &self.values[s..s + width]
    }

    fn check_inputs(&self, question: &TokenSeq, image: &GridImage) -> Result<()> {
        if image.num_patches() > self.arch.n_max {
            return Err(Error::Domain(format!(
                "image has {} patches, policy supports {}",
                image.num_patches(),
                self.arch.n_max
            )));
        }
        if let Some(s) = image.cells().iter().find(|s| s.0 as usize >= self.arch.a_sym) {
            return Err(Error::Domain(format!("patch symbol {} outside alphabet", s.0)));
        }
        if let Some(t) = question.tokens().iter().find(|&&t| t as usize >= self.arch.v_q) {
            return Err(Error::Domain(format!("question token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn patch_keys(&self, image: &GridImage) -> Vec<f64> {
        let d = self.arch.d;
        let mut keys = Vec::with_capacity(image.num_patches() * d);
        for (j, sym) in image.cells().iter().enumerate() {
            let e = self.row(&self.layout.sym_embed, sym.0 as usize, d);
            let p = self.row(&self.layout.pos_embed, j, d);
            keys.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        keys
    }

    fn question_context(&self, question: &TokenSeq) -> Vec<f64> {
        let d = self.arch.d;
        let mut c = vec![0.0; d];
        for &t in question.tokens() {
            for (ci, e) in c.iter_mut().zip(self.row(&self.layout.tok_embed, t as usize, d)) {
                *ci += e;
            }
        }
        let n = question.len() as f64;
        c.iter_mut().for_each(|x| *x /= n);
        c
    }

    fn add_token(&self, c: &mut [f64], token: TokenId) {
        let d = self.arch.d;
        for (ci, e) in c.iter_mut().zip(self.row(&self.layout.tok_embed, token as usize, d)) {
            *ci += e;
        }
    }

    /// One decoding step from context `c`.
    fn step(&self, keys: &[f64], c: &[f64]) -> StepTrace {
        let ArchConfig { d, h, v_out, .. } = self.arch;
        let n = keys.len() / d;
        let wa = &self.values[self.layout.attn.clone()];
        let u: Vec<f64> = (0..d).map(|r| dot(&wa[r * d..(r + 1) * d], c)).collect();

        let scale = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = (0..n).map(|j| scale * dot(&u, &keys[j * d..(j + 1) * d])).collect();
        let alpha = softmax(&scores);

        let mut x = c.to_vec();
        for (j, a) in alpha.iter().enumerate() {
            for (xi, k) in x.iter_mut().zip(&keys[j * d..(j + 1) * d]) {
                *xi += a * k;
            }
        }

        let w1 = &self.values[self.layout.w1.clone()];
        let b1 = &self.values[self.layout.b1.clone()];
        let z: Vec<f64> = (0..h).map(|r| (dot(&w1[r * d..(r + 1) * d], &x) + b1[r]).tanh()).collect();

        let w2 = &self.values[self.layout.w2.clone()];
        let b2 = &self.values[self.layout.b2.clone()];
        let logits: Vec<f64> = (0..v_out).map(|r| dot(&w2[r * h..(r + 1) * h], &z) + b2[r]).collect();

        StepTrace {
            c: c.to_vec(),
            u,
            alpha,
            x,
            z,
            logits,
            allowed: None,
        }
    }

    fn allowed(&self, space: Option<&AnswerSpace>, prefix: &[TokenId]) -> Result<Option<Vec<bool>>> {
        space.map(|s| s.allowed(prefix, self.arch.v_out)).transpose()
    }

    /// Forward pass over a fixed response, keeping what the backward pass needs.
    ///
    /// Under an answer space the softmax is restricted to the tokens the space
    /// allows at each position.
    pub fn trace(
        &self,
        question: &TokenSeq,
        image: &GridImage,
        response: &TokenSeq,
        space: Option<&AnswerSpace>,
    ) -> Result<SequenceTrace> {
        self.check_inputs(question, image)?;
        if response.len() > self.arch.max_answer_len {
            return Err(Error::Domain(format!(
                "response of {} tokens exceeds max_answer_len {}",
                response.len(),
                self.arch.max_answer_len
            )));
        }
        if let Some(t) = response.tokens().iter().find(|&&t| t as usize >= self.arch.v_out) {
            return Err(Error::Domain(format!("response token {t} outside output vocabulary")));
        }
        let keys = self.patch_keys(image);
        let mut c = self.question_context(question);
        let mut steps = Vec::with_capacity(response.len());
        let mut logp = Vec::with_capacity(response.len());
        for (t, &tok) in response.tokens().iter().enumerate() {
            let mut st = self.step(&keys, &c);
            st.allowed = self.allowed(space, &response.tokens()[..t])?;
            if st.allowed.as_ref().is_some_and(|a| !a[tok as usize]) {
                return Err(Error::Domain(format!("token {tok} at position {t} leaves the answer space")));
            }
            let lp = log_softmax_at(&st.logits, st.allowed.as_deref(), tok as usize);
            if !lp.is_finite() {
                return Err(Error::numeric("policy log-probability"));
            }
            logp.push(lp);
            steps.push(st);
            self.add_token(&mut c, tok);
        }
        Ok(SequenceTrace {
            question: question.clone(),
            cells: image.cells().to_vec(),
            response: response.clone(),
            keys,
            steps,
            logp,
        })
    }

    /// Adds `Σ_t coeffs[t] · ∇ log π(o_t)` to `grad`.
    pub fn backward(&self, trace: &SequenceTrace, coeffs: &[f64], grad: &mut [f64]) {
        assert_eq!(coeffs.len(), trace.steps.len(), "one coefficient per token");
        assert_eq!(grad.len(), self.values.len(), "gradient buffer size");
        let ArchConfig { d, h, v_out, .. } = self.arch;
        let n = trace.cells.len();
        let l = &self.layout;
        let scale = 1.0 / (d as f64).sqrt();
        let mut d_keys = vec![0.0; n * d];
        // d(loss)/d(c_t) per step; c_t depends on the question and earlier tokens.
        let mut d_ctx = vec![vec![0.0; d]; trace.steps.len()];

        for (t, (st, &g)) in trace.steps.iter().zip(coeffs).enumerate() {
            if g == 0.0 {
                continue;
            }
            let tok = trace.response.tokens()[t] as usize;
            let probs = masked_softmax(&st.logits, st.allowed.as_deref());
            let d_logits: Vec<f64> = (0..v_out)
                .map(|k| g * ((k == tok) as u8 as f64 - probs[k]))
                .collect();

            let mut dz = vec![0.0; h];
            for (k, &dl) in d_logits.iter().enumerate() {
                grad[l.b2.start + k] += dl;
                let row = l.w2.start + k * h;
                for r in 0..h {
                    grad[row + r] += dl * st.z[r];
                    dz[r] += dl * self.values[row + r];
                }
            }

            let mut dx = vec![0.0; d];
            for r in 0..h {
                let da = dz[r] * (1.0 - st.z[r] * st.z[r]);
                grad[l.b1.start + r] += da;
                let row = l.w1.start + r * d;
                for i in 0..d {
                    grad[row + i] += da * st.x[i];
                    dx[i] += da * self.values[row + i];
                }
            }

            // x = Σ α_j key_j + c
            let dc = &mut d_ctx[t];
            for i in 0..d {
                dc[i] += dx[i];
            }
            let mut d_alpha = vec![0.0; n];
            for j in 0..n {
                let key = &trace.keys[j * d..(j + 1) * d];
                d_alpha[j] = dot(key, &dx);
                for i in 0..d {
                    d_keys[j * d + i] += st.alpha[j] * dx[i];
                }
            }
            let mean: f64 = st.alpha.iter().zip(&d_alpha).map(|(a, da)| a * da).sum();
            let mut du = vec![0.0; d];
            for j in 0..n {
                let ds = st.alpha[j] * (d_alpha[j] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                for i in 0..d {
                    du[i] += ds * trace.keys[j * d + i];
                    d_keys[j * d + i] += ds * st.u[i];
                }
            }
            // u = W_a c
            for r in 0..d {
                let row = l.attn.start + r * d;
                for i in 0..d {
                    grad[row + i] += du[r] * st.c[i];
                    dc[i] += du[r] * self.values[row + i];
                }
            }
        }

        // key_j = E_sym[cell_j] + P[j]
        for (j, sym) in trace.cells.iter().enumerate() {
            let dk = &d_keys[j * d..(j + 1) * d];
            let s = l.sym_embed.start + sym.0 as usize * d;
            let p = l.pos_embed.start + j * d;
            for i in 0..d {
                grad[s + i] += dk[i];
                grad[p + i] += dk[i];
            }
        }

        // c_t = mean_k E[q_k] + Σ_{s<t} E[o_s]
        let mut total = vec![0.0; d];
        for (t, dc) in d_ctx.iter().enumerate() {
            for i in 0..d {
                total[i] += dc[i];
            }
            // earlier tokens feed every later context
            for s in 0..t {
                let row = l.tok_embed.start + trace.response.tokens()[s] as usize * d;
                for i in 0..d {
                    grad[row + i] += dc[i];
                }
            }
        }
        let qn = trace.question.len() as f64;
        for &q in trace.question.tokens() {
            let row = l.tok_embed.start + q as usize * d;
            for i in 0..d {
                grad[row + i] += total[i] / qn;
            }
        }
    }

    /// Next-token distribution after `prefix`, at temperature 1.
    pub fn next_token_probs(
        &self,
        question: &TokenSeq,
        image: &GridImage,
        prefix: &[TokenId],
        space: Option<&AnswerSpace>,
    ) -> Result<Vec<f64>> {
        self.check_inputs(question, image)?;
        let keys = self.patch_keys(image);
        let mut c = self.question_context(question);
        for &t in prefix {
            if t as usize >= self.arch.v_out {
                return Err(Error::Domain(format!("prefix token {t} outside output vocabulary")));
            }
            self.add_token(&mut c, t);
        }
        let allowed = self.allowed(space, prefix)?;
        Ok(masked_softmax(&self.step(&keys, &c).logits, allowed.as_deref()))
    }
}

/// Saved activations of one teacher-forced forward pass.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    question: TokenSeq,
    cells: Vec<Symbol>,
    response: TokenSeq,
    keys: Vec<f64>,
    steps: Vec<StepTrace>,
    logp: Vec<f64>,
}

impl SequenceTrace {
    pub fn logp(&self) -> &[f64] {
        &self.logp
    }

    /// Attention weights over patches at each decoding step.
    pub fn attention(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.alpha.as_slice()).collect()
    }
}

#[derive(Debug, Clone)]
struct StepTrace {
    c: Vec<f64>,
    u: Vec<f64>,
    alpha: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    logits: Vec<f64>,
    /// Tokens the answer space admits at this step; all when `None`.
    allowed: Option<Vec<bool>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax over the allowed entries; disallowed entries get probability 0.
fn masked_softmax(x: &[f64], allowed: Option<&[bool]>) -> Vec<f64> {
    let Some(allowed) = allowed else {
        return softmax(x);
    };
    let m = x
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x
        .iter()
        .zip(allowed)
        .map(|(v, &a)| if a { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(x: &[f64], allowed: Option<&[bool]>, k: usize) -> f64 {
    let on = |i: usize| allowed.is_none_or(|a| a[i]);
    let m = (0..x.len()).filter(|&i| on(i)).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + (0..x.len()).filter(|&i| on(i)).map(|i| (x[i] - m).exp()).sum::<f64>().ln();
    x[k] - lse
}

/// Per-token log-probabilities of `response`.
pub fn logprob_sequence(
    params: &PolicyParams,
    question: &TokenSeq,
    image: &GridImage,
    response: &TokenSeq,
    space: Option<&AnswerSpace>,
) -> Result<Vec<f64>> {
    Ok(params.trace(question, image, response, space)?.logp)
}

/// Decodes until END or `max_answer_len` tokens, within `space` when given.
pub fn sample_response(
    params: &PolicyParams,
    question: &TokenSeq,
    image: &GridImage,
    space: Option<&AnswerSpace>,
    stream: RngStream,
    decoding: Decoding,
) -> Result<TokenSeq> {
    if let Decoding::Sample { temperature } = decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
        }
    }
    params.check_inputs(question, image)?;
    let keys = params.patch_keys(image);
    let mut c = params.question_context(question);
    let mut rng = stream.rng();
    let mut out = Vec::with_capacity(params.arch.max_answer_len);
    while out.len() < params.arch.max_answer_len {
        let logits = params.step(&keys, &c).logits;
        let allowed = params.allowed(space, &out)?;
        let tok = match decoding {
            Decoding::Greedy => argmax(&masked_softmax(&logits, allowed.as_deref())),
            Decoding::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                categorical(&masked_softmax(&scaled, allowed.as_deref()), rng.random::<f64>())
            }
        } as TokenId;
        out.push(tok);
        if tok == vocab::END {
            break;
        }
        params.add_token(&mut c, tok);
    }
    TokenSeq::new(out)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; `u` in [0, 1).
fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Groups with their advantages, ready for one update.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub groups: Vec<RolloutGroup>,
    pub advantages: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: LossEval,
    pub grad: Vec<f64>,
}

/// Recomputes the differentiable tables of `batch` under `params`.
///
/// `logp_new` always follows `params`; `logp_mask` does too when the
/// masked-branch gradient is enabled, and otherwise stays the constant stored
/// at collection time.
fn refresh(
    params: &PolicyParams,
    batch: &Batch,
    cfg: &ObjectiveConfig,
) -> Result<(Vec<RolloutGroup>, Vec<Vec<(SequenceTrace, Option<SequenceTrace>)>>)> {
    let per_group: Vec<Result<(RolloutGroup, Vec<(SequenceTrace, Option<SequenceTrace>)>)>> = batch
        .groups
        .par_iter()
        .map(|group| {
            let mut g = group.clone();
            let mut traces = Vec::with_capacity(g.size());
            for i in 0..g.size() {
                let q = &g.prompt.question;
                let resp = &g.responses[i];
                let space = g.prompt.answer_space();
                let tn = params.trace(q, &g.prompt.image, resp, space)?;
                g.logp_new[i] = tn.logp.clone();
                let tm = if cfg.mask_branch_grad {
                    let tm = params.trace(q, &g.masked_images[i], resp, space)?;
                    g.logp_mask[i] = tm.logp.clone();
                    Some(tm)
                } else {
                    None
                };
                traces.push((tn, tm));
            }
            Ok((g, traces))
        })
        .collect();
    let mut groups = Vec::with_capacity(per_group.len());
    let mut traces = Vec::with_capacity(per_group.len());
    for r in per_group {
        let (g, t) = r?;
        groups.push(g);
        traces.push(t);
    }
    Ok((groups, traces))
}

/// Scalar loss of `batch` as a function of `params`.
pub fn loss_value(params: &PolicyParams, batch: &Batch, cfg: &ObjectiveConfig) -> Result<f64> {
    let (groups, _) = refresh(params, batch, cfg)?;
    Ok(batch_loss(&groups, &batch.advantages, cfg)?.breakdown.total)
}

/// Exact gradient of the configured loss with respect to every parameter.
///
/// `logp_old` and `logp_ref` are constants; `logp_mask` is constant unless
/// `cfg.mask_branch_grad` is set.
pub fn loss_gradient(params: &PolicyParams, batch: &Batch, cfg: &ObjectiveConfig) -> Result<GradientOutput> {
    let (groups, traces) = refresh(params, batch, cfg)?;
    let loss = batch_loss(&groups, &batch.advantages, cfg)?;
    let n = params.len();
    let partials: Vec<Vec<f64>> = traces
        .par_iter()
        .enumerate()
        .map(|(gi, group_traces)| {
            let mut grad = vec![0.0; n];
            for (i, (tn, tm)) in group_traces.iter().enumerate() {
                params.backward(tn, &loss.d_logp_new[gi][i], &mut grad);
                if let Some(tm) = tm {
                    params.backward(tm, &loss.d_logp_mask[gi][i], &mut grad);
                }
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0; n];
    for p in &partials {
        for (g, x) in grad.iter_mut().zip(p) {
            *g += x;
        }
    }
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        let block = params
            .layout
            .blocks()
            .into_iter()
            .find(|(_, r)| r.contains(&bad))
            .map(|(name, _)| name)
            .unwrap_or("?");
        return Err(Error::numeric(format!("gradient of {block}")));
    }
    Ok(GradientOutput { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Color;
    use crate::masking::mask_all;

    fn toy_inputs() -> (TokenSeq, GridImage) {
        let q = TokenSeq::new(vec![vocab::HOW, vocab::MANY, vocab::RED, vocab::QMARK]).unwrap();
        let cells = (0..9).map(|i| if i % 3 == 0 { Color::Red.symbol() } else { Symbol::EMPTY }).collect();
        (q, GridImage::new(3, 3, cells).unwrap())
    }

    #[test]
    fn default_param_count() {
        let a = ArchConfig::default();
        assert_eq!(a.num_params(), 6 * 16 + 28 * 16 + 64 * 16 + 16 * 16 + 32 * 16 + 32 + 28 * 32 + 28);
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(ArchConfig::default()).unwrap();
        let (q, img) = toy_inputs();
        let r = TokenSeq::new(vec![3, vocab::END]).unwrap();
        let lp = logprob_sequence(&p, &q, &img, &r, None).unwrap();
        let u = -(vocab::TEXT_VOCAB as f64).ln();
        assert!(lp.iter().all(|&x| (x - u).abs() < 1e-12));
    }

    #[test]
    fn step_distributions_normalize() {
        let p = PolicyParams::init(ArchConfig::default(), RngStream::new(4), 0.5).unwrap();
        let (q, img) = toy_inputs();
        for prefix in [&[][..], &[2][..], &[2, 5][..]] {
            let probs = p.next_token_probs(&q, &img, prefix, None).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let r = TokenSeq::new(vec![2, 5, vocab::END]).unwrap();
        assert!(logprob_sequence(&p, &q, &img, &r, None).unwrap().iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn single_patch_embedding_changes_output() {
        let mut p = PolicyParams::zeros(ArchConfig::default()).unwrap();
        let (q, img) = toy_inputs();
        let d = p.arch.d;
        // nonzero embedding for "red" only; w1 and w2 pass it through to the logits
        let red = p.layout.sym_embed.start + Color::Red.symbol().0 as usize * d;
        p.values[red] = 1.0;
        let w1 = p.layout.w1.start;
        p.values[w1] = 1.0;
        let w2 = p.layout.w2.start + 3 * p.arch.h;
        p.values[w2] = 1.0;
        let r = TokenSeq::new(vec![3]).unwrap();
        let lp = logprob_sequence(&p, &q, &img, &r, None).unwrap()[0];
        let lp_masked = logprob_sequence(&p, &q, &mask_all(&img), &r, None).unwrap()[0];

        // x_0 = mean over patches of the red embedding = 3/9; z_0 = tanh(1/3)
        let z = (1.0f64 / 3.0).tanh();
        let v = vocab::TEXT_VOCAB as f64;
        let expect = z - (z.exp() + (v - 1.0)).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!((lp_masked + v.ln()).abs() < 1e-12);
        assert!(lp != lp_masked);
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let p = PolicyParams::zeros(ArchConfig::default()).unwrap();
        let (q, img) = toy_inputs();
        let long = TokenSeq::new(vec![1, 2, 3, 4]).unwrap();
        assert!(matches!(logprob_sequence(&p, &q, &img, &long, None), Err(Error::Domain(_))));
        let small = ArchConfig { n_max: 4, ..ArchConfig::default() };
        let p = PolicyParams::zeros(small).unwrap();
        assert!(matches!(
            logprob_sequence(&p, &q, &img, &TokenSeq::new(vec![1]).unwrap(), None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let p = PolicyParams::init(ArchConfig::default(), RngStream::new(1), 0.5).unwrap();
        let (q, img) = toy_inputs();
        let s = RngStream::new(5).derive("x");
        let t = Decoding::Sample { temperature: 1.0 };
        assert_eq!(
            sample_response(&p, &q, &img, None, s, t).unwrap(),
            sample_response(&p, &q, &img, None, s, t).unwrap()
        );
        assert!(sample_response(&p, &q, &img, None, s, Decoding::Sample { temperature: 0.0 }).is_err());
    }

    #[test]
    fn greedy_is_low_temperature_limit() {
        let p = PolicyParams::init(ArchConfig::default(), RngStream::new(2), 1.0).unwrap();
        let (q, img) = toy_inputs();
        let g = sample_response(&p, &q, &img, None, RngStream::new(0), Decoding::Greedy).unwrap();
        for k in 0..20 {
            let s = sample_response(&p, &q, &img, None, RngStream::new(k), Decoding::Sample { temperature: 1e-4 }).unwrap();
            assert_eq!(s, g);
        }
    }

    #[test]
    fn responses_stop_at_end_or_length() {
        let p = PolicyParams::init(ArchConfig::default(), RngStream::new(3), 1.0).unwrap();
        let (q, img) = toy_inputs();
        for k in 0..50 {
            let r = sample_response(&p, &q, &img, None, RngStream::new(k), Decoding::Sample { temperature: 1.0 }).unwrap();
            assert!(r.len() <= 3);
            let end = r.tokens().iter().position(|&t| t == vocab::END);
            if let Some(e) = end {
                assert_eq!(e, r.len() - 1);
            } else {
                assert_eq!(r.len(), 3);
            }
        }
    }

    #[test]
    fn blind_policy_ignores_masking() {
        let mut p = PolicyParams::init(ArchConfig::default(), RngStream::new(8), 0.7).unwrap();
        let r = p.layout.sym_embed.clone();
        p.values[r].iter_mut().for_each(|v| *v = 0.0);
        let (q, img) = toy_inputs();
        let resp = TokenSeq::new(vec![4, vocab::END]).unwrap();
        assert_eq!(
            logprob_sequence(&p, &q, &img, &resp, None).unwrap(),
            logprob_sequence(&p, &q, &mask_all(&img), &resp, None).unwrap()
        );
    }

    #[test]
    fn permuting_patches_with_positions_is_invariant() {
        let mut p = PolicyParams::init(ArchConfig::default(), RngStream::new(11), 0.6).unwrap();
        let (q, img) = toy_inputs();
        let resp = TokenSeq::new(vec![3, vocab::END]).unwrap();
        let before = logprob_sequence(&p, &q, &img, &resp, None).unwrap();
        let (a, b) = (0usize, 4usize);
        let mut cells = img.cells().to_vec();
        cells.swap(a, b);
        let swapped = GridImage::new(3, 3, cells).unwrap();
        let d = p.arch.d;
        let base = p.layout.pos_embed.start;
        for i in 0..d {
            p.values.swap(base + a * d + i, base + b * d + i);
        }
        let after = logprob_sequence(&p, &q, &swapped, &resp, None).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constrained_zero_policy_is_uniform_over_allowed() {
        let p = PolicyParams::zeros(ArchConfig::default()).unwrap();
        let (q, img) = toy_inputs();
        let space = AnswerSpace::new((0..=9).map(vocab::number).collect()).unwrap();
        let r = TokenSeq::new(vec![3, vocab::END]).unwrap();
        let lp = logprob_sequence(&p, &q, &img, &r, Some(&space)).unwrap();
        assert!((lp[0] + 10f64.ln()).abs() < 1e-12);
        // Only END can follow a complete single-digit answer.
        assert_eq!(lp[1], 0.0);
        let probs = p.next_token_probs(&q, &img, &[], Some(&space)).unwrap();
        assert!(probs[vocab::END as usize] == 0.0 && probs[vocab::RED as usize] == 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constrained_sampling_stays_in_space() {
        let p = PolicyParams::init(ArchConfig::default(), RngStream::new(2), 1.0).unwrap();
        let (q, img) = toy_inputs();
        let space = AnswerSpace::new(vec![vec![vocab::RED], vec![vocab::BLUE]]).unwrap();
        for k in 0..200 {
            let r = sample_response(&p, &q, &img, Some(&space), RngStream::new(k), Decoding::Sample { temperature: 1.0 })
                .unwrap();
            let toks = r.tokens();
            assert_eq!(toks.len(), 2);
            assert!(space.contains(&toks[..1]) && toks[1] == vocab::END);
        }
        let outside = TokenSeq::new(vec![vocab::GREEN, vocab::END]).unwrap();
        assert!(matches!(p.trace(&q, &img, &outside, Some(&space)), Err(Error::Domain(_))));
    }
}
