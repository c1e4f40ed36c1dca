//! Drift monitoring over thinking streams.
//!
//! A thinking stream is the sequence of cognitive states `s_j = (t_<j, z_j)`
//! met while reading a reasoning chain token by token, where `z_j` is the
//! policy's answer distribution if it had to stop thinking at position `j`.
//! Drift is flagged wherever consecutive answer distributions move further
//! apart (in total variation) than a threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::record_seed;
use crate::policy::{Decoding, PolicyError, PolicyParams};
use crate::trajectory::{
    render_trajectory, Context, Phrasebook, Token, Trajectory, TrajectoryError, Vocab, DEFAULT_MAX_LEN,
    END_THINK, EOS, THINK,
};

/// Additive smoothing applied to both distributions before KL.
pub const KL_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriftError {
    #[error("bad prefix: {0}")]
    BadPrefix(String),
    #[error("no checkpoint for regime {0}")]
    RegimeUnknown(u32),
    #[error("trajectories do not share a context")]
    ContextMismatch,
    #[error("vocabulary has no answer labels")]
    NoLabels,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// How `z_j` is read off the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LatentMode {
    /// Force `</think>` and renormalize the next-token distribution over the
    /// answer labels.
    Exact,
    /// Sample `n` continuations; `z_k = (c_k + 1) / (n + K)`.
    Rollout { n: usize, seed: u64 },
}

impl LatentMode {
    fn name(&self) -> &'static str {
        match self {
            LatentMode::Exact => "exact",
            LatentMode::Rollout { .. } => "rollout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CognitiveState {
    /// Body prefix, starting with `<think>`.
    pub prefix: Vec<Token>,
    /// Distribution over `vocab.labels()`.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThinkingStream {
    pub states: Vec<CognitiveState>,
    /// `log π(t_j | t_<j)` for each thinking token, one per transition.
    pub token_logprobs: Vec<f64>,
    pub mode: LatentMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    /// TV(z_j, z_{j+1}) for each transition j.
    pub tv: Vec<f64>,
    /// KL(z_j ‖ z_{j+1}) after smoothing.
    pub kl: Vec<f64>,
    pub token_logprob: Vec<f64>,
    pub flagged: Vec<usize>,
    pub threshold: f64,
    pub mode: LatentMode,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn smoothed(p: &[f64]) -> Vec<f64> {
    let z: f64 = p.iter().map(|x| x + KL_EPSILON).sum();
    p.iter().map(|x| (x + KL_EPSILON) / z).collect()
}

/// KL(p ‖ q) with add-ε smoothing on both sides.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (smoothed(p), smoothed(q));
    p.iter()
        .zip(&q)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

fn check_prefix(prefix: &[Token]) -> Result<bool, DriftError> {
    if prefix.first() != Some(&THINK) {
        return Err(DriftError::BadPrefix("must start with <think>".into()));
    }
    if prefix[1..].contains(&THINK) || prefix.contains(&EOS) {
        return Err(DriftError::BadPrefix("extra <think> or <eos>".into()));
    }
    match prefix.iter().position(|&t| t == END_THINK) {
        None => Ok(false),
        Some(p) if p == prefix.len() - 1 => Ok(true),
        Some(_) => Err(DriftError::BadPrefix("tokens after </think>".into())),
    }
}

/// Answer distribution after the body prefix `prefix`.
pub fn latent_outcome(
    policy: &PolicyParams,
    vocab: &Vocab,
    context: &Context,
    prefix: &[Token],
    mode: LatentMode,
) -> Result<Vec<f64>, DriftError> {
    let closed = check_prefix(prefix)?;
    let labels = vocab.labels();
    if labels.is_empty() {
        return Err(DriftError::NoLabels);
    }
    match mode {
        LatentMode::Exact => {
            let mut history = context.tokens();
            history.extend_from_slice(prefix);
            if !closed {
                history.push(END_THINK);
            }
            let lp = policy.next_log_probs(&history)?;
            let restricted: Vec<f64> = labels.iter().map(|&t| lp[t as usize]).collect();
            let max = restricted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = restricted.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = w.iter().sum();
            Ok(w.into_iter().map(|x| x / z).collect())
        }
        LatentMode::Rollout { n, seed } => {
            let answers = (0..n)
                .into_par_iter()
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, k as u64));
                    let t = policy.continue_from(
                        context,
                        prefix,
                        vocab,
                        &mut rng,
                        DEFAULT_MAX_LEN,
                        Decoding::Sample { temperature: 1.0 },
                    )?;
                    Ok(t.answer)
                })
                .collect::<Result<Vec<_>, DriftError>>()?;
            let mut counts = vec![0usize; labels.len()];
            for a in answers {
                let i = vocab.label_position(a).expect("continuations end in a label");
                counts[i] += 1;
            }
            let denom = (n + labels.len()) as f64;
            Ok(counts.into_iter().map(|c| (c as f64 + 1.0) / denom).collect())
        }
    }
}

/// States for every prefix `<think> t_<j`, j = 0..=len(thinking).
pub fn build_stream(
    policy: &PolicyParams,
    vocab: &Vocab,
    trajectory: &Trajectory,
    mode: LatentMode,
) -> Result<ThinkingStream, DriftError> {
    let mut prefixes = Vec::with_capacity(trajectory.thinking.len() + 1);
    let mut prefix = vec![THINK];
    prefixes.push(prefix.clone());
    for &t in &trajectory.thinking {
        prefix.push(t);
        prefixes.push(prefix.clone());
    }
    let states = prefixes
        .into_par_iter()
        .map(|prefix| {
            let z = latent_outcome(policy, vocab, &trajectory.context, &prefix, mode)?;
            Ok(CognitiveState { prefix, z })
        })
        .collect::<Result<Vec<_>, DriftError>>()?;
    let mut body = vec![THINK];
    body.extend_from_slice(&trajectory.thinking);
    let all = policy.token_logprobs(&trajectory.context.tokens(), &body)?;
    Ok(ThinkingStream {
        states,
        token_logprobs: all[1..].to_vec(),
        mode,
    })
}

/// Flags every transition whose TV exceeds `threshold_tv`.
pub fn detect_drift(stream: &ThinkingStream, threshold_tv: f64) -> DriftReport {
    let mut tv = Vec::new();
    let mut kl = Vec::new();
    let mut flagged = Vec::new();
    for (j, w) in stream.states.windows(2).enumerate() {
        let d = total_variation(&w[0].z, &w[1].z);
        if d > threshold_tv {
            flagged.push(j);
        }
        tv.push(d);
        kl.push(kl_divergence(&w[0].z, &w[1].z));
    }
    DriftReport {
        tv,
        kl,
        token_logprob: stream.token_logprobs.clone(),
        flagged,
        threshold: threshold_tv,
        mode: stream.mode,
    }
}

pub const DRIFT_HEADER: &str = "position,tv,kl,token_logprob,flagged";

impl DriftReport {
    pub fn is_flagged(&self) -> bool {
        !self.flagged.is_empty()
    }

    /// Rows without the header line.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for j in 0..self.tv.len() {
            let lp = self.token_logprob.get(j).copied().unwrap_or(f64::NAN);
            let flag = u8::from(self.flagged.contains(&j));
            writeln!(out, "{j},{},{},{lp},{flag}", self.tv[j], self.kl[j]).expect("string write");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{DRIFT_HEADER}\n{}", self.csv_rows())
    }

    pub fn mode_name(&self) -> &'static str {
        self.mode.name()
    }
}

/// Probability mass on one answer label; the default expectation for ψ.
pub fn label_mass(vocab: &Vocab, label: Token) -> impl Fn(&[f64]) -> f64 + '_ {
    let i = vocab.label_position(label);
    move |z: &[f64]| i.map_or(0.0, |i| z[i])
}

/// ψ = E[f(Z) | do(T = t), D = d] − E[f(Z) | do(T = t′), D = d].
///
/// The regime `d` selects the checkpoint; both chains are read with the same
/// estimator (and the same rollout seed) so the difference is paired.
pub fn causal_effect<F>(
    checkpoints: &BTreeMap<u32, PolicyParams>,
    regime: u32,
    vocab: &Vocab,
    t: &Trajectory,
    t_prime: &Trajectory,
    mode: LatentMode,
    expectation: F,
) -> Result<f64, DriftError>
where
    F: Fn(&[f64]) -> f64,
{
    if t.context != t_prime.context {
        return Err(DriftError::ContextMismatch);
    }
    let policy = checkpoints
        .get(&regime)
        .ok_or(DriftError::RegimeUnknown(regime))?;
    let closed = |x: &Trajectory| {
        let mut p = vec![THINK];
        p.extend_from_slice(&x.thinking);
        p.push(END_THINK);
        p
    };
    let z = latent_outcome(policy, vocab, &t.context, &closed(t), mode)?;
    let z_prime = latent_outcome(policy, vocab, &t.context, &closed(t_prime), mode)?;
    Ok(expectation(&z) - expectation(&z_prime))
}

/// A stream whose generating regime switches mid-chain: the first `keep`
/// findings of `base`, then every finding of `donor`, answered as `donor`.
/// The context stays that of `base`.
pub fn splice_shift(
    phrasebook: &Phrasebook,
    vocab: &Vocab,
    base: &Trajectory,
    donor: &Trajectory,
    keep: usize,
) -> Result<Trajectory, DriftError> {
    let mut findings: Vec<_> = phrasebook.segment(&base.thinking)?.into_iter().take(keep).collect();
    findings.extend(phrasebook.segment(&donor.thinking)?);
    Ok(render_trajectory(&base.context, &findings, vocab.word(donor.answer), vocab)?)
}
