//! Counterfactual preference objective, supervised baseline, and the
//! windowed training loop.
//!
//! For a pair `(t+, t-)` sharing one context, with
//! `Δ(t) = log π_θ(t) − log π_ref(t)`:
//!
//! ```text
//! margin = β · (Δ(t+) − Δ(t-))          (implicit reward difference)
//! loss   = −ln σ(margin)
//! ∂loss/∂θ = −β σ(−margin) · (∇log π_θ(t+) − ∇log π_θ(t-))
//! ```
//!
//! The reference policy is frozen; no gradient ever flows into it.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyError, PolicyGradient, PolicyParams};
use crate::trajectory::{PreferencePair, Token, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CpoError {
    #[error("policy and reference disagree on vocabulary or shape")]
    VocabMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("regime schedule has no segment for step {0}")]
    ScheduleExhausted(usize),
    #[error("regime {0} has no training data")]
    EmptySegment(u32),
    #[error("non-finite loss at step {step}: loss={loss}, grad_norm={grad_norm}")]
    NonFiniteLoss { step: usize, loss: f64, grad_norm: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sft,
    Cpo,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sft => "sft",
            Mode::Cpo => "cpo",
        })
    }
}

/// Steps `[start, end)` draw minibatches from the corpus segment `regime`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub regime: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub regime_schedule: Vec<ScheduleEntry>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
}

impl Default for CpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 16,
            seed: 0,
            regime_schedule: vec![ScheduleEntry {
                regime: 0,
                start: 0,
                end: 500,
            }],
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            weight_decay: 0.05,
        }
    }
}

impl CpoConfig {
    /// Default SFT settings: learning rate 1e-2.
    pub fn sft_default() -> Self {
        Self {
            learning_rate: 1e-2,
            ..Self::default()
        }
    }

    /// Splits `steps` evenly across `regimes`, in order.
    pub fn with_even_schedule(mut self, regimes: &[u32]) -> Self {
        let n = regimes.len().max(1);
        self.regime_schedule = regimes
            .iter()
            .enumerate()
            .map(|(i, &regime)| ScheduleEntry {
                regime,
                start: self.steps * i / n,
                end: self.steps * (i + 1) / n,
            })
            .filter(|e| e.end > e.start)
            .collect();
        self
    }

    pub fn validate(&self) -> Result<(), CpoError> {
        let bad = |m: &str| Err(CpoError::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        let mut expected_start = 0;
        for e in &self.regime_schedule {
            if e.start != expected_start {
                return bad("schedule segments must be contiguous from step 0");
            }
            if e.end <= e.start {
                return bad("schedule segments must be nonempty");
            }
            expected_start = e.end;
        }
        Ok(())
    }

    fn regime_at(&self, step: usize) -> Option<u32> {
        self.regime_schedule
            .iter()
            .find(|e| e.start <= step && step < e.end)
            .map(|e| e.regime)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Argument of σ; identical to `reward_diff`.
    pub margin: f64,
    pub reward_diff: f64,
    pub grad_norm: Option<f64>,
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_compatible(theta: &PolicyParams, reference: &PolicyParams) -> Result<(), CpoError> {
    if theta.vocab_size != reference.vocab_size || theta.hyper != reference.hyper {
        return Err(CpoError::VocabMismatch);
    }
    Ok(())
}

fn report_from_margin(margin: f64) -> LossReport {
    LossReport {
        loss: softplus(-margin),
        margin,
        reward_diff: margin,
        grad_norm: None,
    }
}

/// Reference log-probabilities of (t+, t-).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceLogprobs {
    pub preferred: f64,
    pub counterfactual: f64,
}

impl ReferenceLogprobs {
    pub fn of(reference: &PolicyParams, pair: &PreferencePair) -> Result<Self, CpoError> {
        Ok(Self {
            preferred: reference.trajectory_logprob(&pair.preferred)?,
            counterfactual: reference.trajectory_logprob(&pair.counterfactual)?,
        })
    }
}

fn margin_with(
    theta: &PolicyParams,
    pair: &PreferencePair,
    cached: ReferenceLogprobs,
    beta: f64,
) -> Result<f64, CpoError> {
    let plus = theta.trajectory_logprob(&pair.preferred)? - cached.preferred;
    let minus = theta.trajectory_logprob(&pair.counterfactual)? - cached.counterfactual;
    Ok(beta * (plus - minus))
}

/// β[log-ratio(t+) − log-ratio(t-)].
pub fn implicit_reward_diff(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, CpoError> {
    check_compatible(theta, reference)?;
    margin_with(theta, pair, ReferenceLogprobs::of(reference, pair)?, beta)
}

pub fn cpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<LossReport, CpoError> {
    Ok(report_from_margin(implicit_reward_diff(theta, reference, pair, beta)?))
}

/// Mean loss, margin and reward difference over a batch.
pub fn cpo_loss_batch(
    theta: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<LossReport, CpoError> {
    let reports = batch
        .iter()
        .map(|p| cpo_loss(theta, reference, p, beta))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_report(&reports))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let loss = reports.iter().map(|r| r.loss).sum::<f64>() / n;
    let margin = reports.iter().map(|r| r.margin).sum::<f64>() / n;
    LossReport {
        loss,
        margin,
        reward_diff: margin,
        grad_norm: None,
    }
}

/// Per-pair gradient of `scale · loss`, with the reference log-probs given.
fn pair_gradient(
    theta: &PolicyParams,
    pair: &PreferencePair,
    cached: ReferenceLogprobs,
    beta: f64,
    scale: f64,
) -> Result<(LossReport, PolicyGradient), CpoError> {
    let margin = margin_with(theta, pair, cached, beta)?;
    let upstream = -beta * sigmoid(-margin) * scale;
    let mut grad = PolicyGradient::zeros_like(theta);
    let p = &pair.preferred;
    let n = &pair.counterfactual;
    theta.accumulate_backward(&p.context.tokens(), &p.raw(), upstream, &mut grad)?;
    theta.accumulate_backward(&n.context.tokens(), &n.raw(), -upstream, &mut grad)?;
    Ok((report_from_margin(margin), grad))
}

/// Ordered reduction of per-item results so the sum is independent of how
/// rayon scheduled the items.
fn reduce_in_order(
    theta: &PolicyParams,
    parts: Vec<(LossReport, PolicyGradient)>,
) -> (LossReport, PolicyGradient) {
    let mut total = PolicyGradient::zeros_like(theta);
    let mut reports = Vec::with_capacity(parts.len());
    for (r, g) in parts {
        total.add_scaled(&g, 1.0);
        reports.push(r);
    }
    let mut report = mean_report(&reports);
    report.grad_norm = Some(total.norm());
    (report, total)
}

fn cpo_grad_cached(
    theta: &PolicyParams,
    batch: &[(&PreferencePair, ReferenceLogprobs)],
    beta: f64,
) -> Result<(LossReport, PolicyGradient), CpoError> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let parts = batch
        .par_iter()
        .map(|&(pair, cached)| pair_gradient(theta, pair, cached, beta, scale))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(reduce_in_order(theta, parts))
}

/// Exact gradient of the mean batch loss with respect to θ.
pub fn cpo_grad(
    theta: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(LossReport, PolicyGradient), CpoError> {
    check_compatible(theta, reference)?;
    let cached = batch
        .iter()
        .map(|p| Ok((p, ReferenceLogprobs::of(reference, p)?)))
        .collect::<Result<Vec<_>, CpoError>>()?;
    cpo_grad_cached(theta, &cached, beta)
}

/// Mean negative log-likelihood per token; zero for an empty body.
pub fn sft_loss_tokens(
    theta: &PolicyParams,
    context: &[Token],
    body: &[Token],
) -> Result<f64, CpoError> {
    if body.is_empty() {
        return Ok(0.0);
    }
    Ok(-theta.sequence_logprob(context, body)? / body.len() as f64)
}

pub fn sft_loss(theta: &PolicyParams, t: &Trajectory) -> Result<f64, CpoError> {
    sft_loss_tokens(theta, &t.context.tokens(), &t.raw())
}

/// Mean per-token loss over a batch and its exact gradient.
pub fn sft_grad(theta: &PolicyParams, batch: &[Trajectory]) -> Result<(f64, PolicyGradient), CpoError> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let parts = batch
        .par_iter()
        .map(|t| {
            let body = t.raw();
            let ctx = t.context.tokens();
            let loss = sft_loss_tokens(theta, &ctx, &body)?;
            let mut g = PolicyGradient::zeros_like(theta);
            theta.accumulate_backward(&ctx, &body, -scale / body.len() as f64, &mut g)?;
            Ok((report_from_loss(loss), g))
        })
        .collect::<Result<Vec<_>, CpoError>>()?;
    let (report, grad) = reduce_in_order(theta, parts);
    Ok((report.loss, grad))
}

fn report_from_loss(loss: f64) -> LossReport {
    LossReport {
        loss,
        margin: 0.0,
        reward_diff: 0.0,
        grad_norm: None,
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(num_params: usize, config: &CpoConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: 1e-8,
            weight_decay: config.weight_decay,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn update(&mut self, params: &mut PolicyParams, grad: &PolicyGradient) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let mut i = 0;
        for (ps, gs) in params
            .weights
            .buffers_mut()
            .into_iter()
            .zip(grad.weights.buffers())
        {
            for (p, &g) in ps.iter_mut().zip(gs) {
                let m = &mut self.first[i];
                let v = &mut self.second[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
                *p -= self.learning_rate * (update + self.weight_decay * *p);
                i += 1;
            }
        }
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub mode: Mode,
    pub loss: f64,
    pub margin: Option<f64>,
    pub reward_diff: Option<f64>,
    pub grad_norm: f64,
    pub regime: u32,
}

pub const METRIC_HEADER: &str = "step,mode,loss,margin,reward_diff,grad_norm,regime_id";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.mode,
            self.loss,
            opt(self.margin),
            opt(self.reward_diff),
            self.grad_norm,
            self.regime
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Training corpus split into regime segments.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Sft(&'a BTreeMap<u32, Vec<Trajectory>>),
    Cpo {
        reference: &'a PolicyParams,
        pairs: &'a BTreeMap<u32, Vec<PreferencePair>>,
    },
}

impl TrainData<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            TrainData::Sft(_) => Mode::Sft,
            TrainData::Cpo { .. } => Mode::Cpo,
        }
    }
}

/// Runs `config.steps` seeded minibatch Adam steps over the regime
/// schedule. Returns the final parameters and one metric row per step.
pub fn train(
    theta0: &PolicyParams,
    data: TrainData<'_>,
    config: &CpoConfig,
) -> Result<(PolicyParams, Vec<MetricRow>), CpoError> {
    config.validate()?;
    let mut theta = theta0.clone();
    let mut rows = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok((theta, rows));
    }

    // Reference log-probs are fixed for the whole run.
    let cached: BTreeMap<u32, Vec<ReferenceLogprobs>> = match data {
        TrainData::Cpo { reference, pairs } => {
            check_compatible(&theta, reference)?;
            pairs
                .iter()
                .map(|(&regime, ps)| {
                    let lps = ps
                        .par_iter()
                        .map(|p| ReferenceLogprobs::of(reference, p))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok((regime, lps))
                })
                .collect::<Result<_, CpoError>>()?
        }
        TrainData::Sft(_) => BTreeMap::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(theta.num_params(), config);
    for step in 0..config.steps {
        let regime = config
            .regime_at(step)
            .ok_or(CpoError::ScheduleExhausted(step))?;
        let (report, grad) = match data {
            TrainData::Sft(segments) => {
                let seg = segments
                    .get(&regime)
                    .filter(|s| !s.is_empty())
                    .ok_or(CpoError::EmptySegment(regime))?;
                let batch: Vec<Trajectory> = (0..config.batch_size)
                    .map(|_| seg[rng.gen_range(0..seg.len())].clone())
                    .collect();
                let (loss, grad) = sft_grad(&theta, &batch)?;
                let mut r = report_from_loss(loss);
                r.grad_norm = Some(grad.norm());
                (r, grad)
            }
            TrainData::Cpo { pairs, .. } => {
                let seg = pairs
                    .get(&regime)
                    .filter(|s| !s.is_empty())
                    .ok_or(CpoError::EmptySegment(regime))?;
                let refs = &cached[&regime];
                let batch: Vec<(&PreferencePair, ReferenceLogprobs)> = (0..config.batch_size)
                    .map(|_| {
                        let i = rng.gen_range(0..seg.len());
                        (&seg[i], refs[i])
                    })
                    .collect();
                cpo_grad_cached(&theta, &batch, config.beta)?
            }
        };
        let grad_norm = report.grad_norm.unwrap_or(0.0);
        if !report.loss.is_finite() || !grad_norm.is_finite() {
            return Err(CpoError::NonFiniteLoss {
                step,
                loss: report.loss,
                grad_norm,
            });
        }
        let mode = data.mode();
        rows.push(MetricRow {
            step,
            mode,
            loss: report.loss,
            margin: (mode == Mode::Cpo).then_some(report.margin),
            reward_diff: (mode == Mode::Cpo).then_some(report.reward_diff),
            grad_norm,
            regime,
        });
        adam.update(&mut theta, &grad);
    }
    Ok((theta, rows))
}
