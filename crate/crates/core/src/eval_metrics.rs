//! Answer accuracy under greedy decoding, sentence-level BLEU and ROUGE-L.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use serde::Serialize;

use crate::policy::{Decoding, PolicyError, PolicyParams};
use crate::trajectory::{Token, Trajectory, Vocab};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("reference sentence is empty")]
    EmptyReference,
    #[error("candidate or reference is empty")]
    EmptyInput,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram precision for one order; `None` if the candidate has no
/// n-grams of that order.
fn clipped_precision<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> Option<f64> {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    if total == 0 {
        return None;
    }
    let refc = ngram_counts(reference, n);
    let matched: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    Some(matched as f64 / total as f64)
}

/// Sentence BLEU-1 through BLEU-`max_n`. Orders the candidate is too short
/// for count as zero precision.
pub fn bleu<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], max_n: usize) -> Result<Vec<f64>, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(vec![0.0; max_n]);
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        match clipped_precision(candidate, reference, n) {
            Some(p) if p > 0.0 && !zero => log_sum += p.ln(),
            _ => zero = true,
        }
        out.push(if zero {
            0.0
        } else {
            bp * (log_sum / n as f64).exp()
        });
    }
    Ok(out)
}

/// BLEU-1..4.
pub fn bleu4<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T]) -> Result<[f64; 4], EvalError> {
    let b = bleu(candidate, reference, 4)?;
    Ok([b[0], b[1], b[2], b[3]])
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure: (1 + β²) P R / (R + β² P).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> Result<f64, EvalError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_entity_accuracy: BTreeMap<String, f64>,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("n,{}\naccuracy,{}\n", self.n, self.accuracy));
        for (k, b) in self.bleu.iter().enumerate() {
            out.push_str(&format!("bleu_{},{}\n", k + 1, b));
        }
        out.push_str(&format!("rouge_l,{}\n", self.rouge_l));
        for (e, a) in &self.per_entity_accuracy {
            out.push_str(&format!("accuracy_{e},{a}\n"));
        }
        out
    }
}

/// Greedy decodes of every record's context.
pub fn greedy_decode(
    policy: &PolicyParams,
    gold: &[Trajectory],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<Trajectory>, EvalError> {
    Ok(gold
        .par_iter()
        .map(|t| policy.sample(&t.context, vocab, 0, max_len, Decoding::Greedy))
        .collect::<Result<Vec<_>, _>>()?)
}

/// Fraction of predictions whose answer equals the gold answer, overall and
/// per gold entity.
pub fn answer_accuracy(
    predicted: &[Trajectory],
    gold: &[Trajectory],
    vocab: &Vocab,
) -> Result<(f64, BTreeMap<String, f64>), EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for (p, g) in predicted.iter().zip(gold) {
        let e = per.entry(vocab.word(g.answer).to_string()).or_default();
        e.1 += 1;
        if p.answer == g.answer {
            e.0 += 1;
            hits += 1;
        }
    }
    let per = per
        .into_iter()
        .map(|(k, (h, n))| (k, h as f64 / n as f64))
        .collect();
    Ok((hits as f64 / gold.len() as f64, per))
}

/// Greedy top-1 accuracy of `policy` on `gold`.
pub fn accuracy(
    policy: &PolicyParams,
    gold: &[Trajectory],
    vocab: &Vocab,
    max_len: usize,
) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let predicted = greedy_decode(policy, gold, vocab, max_len)?;
    Ok(answer_accuracy(&predicted, gold, vocab)?.0)
}

/// Thinking followed by the answer: the text compared by the overlap metrics.
fn reasoning_text(t: &Trajectory) -> Vec<Token> {
    let mut out = t.thinking.clone();
    out.push(t.answer);
    out
}

/// Accuracy plus mean sentence BLEU/ROUGE-L of decoded reasoning against
/// the gold reasoning.
pub fn evaluate(
    policy: &PolicyParams,
    gold: &[Trajectory],
    vocab: &Vocab,
    max_len: usize,
    rouge_beta: f64,
) -> Result<EvalReport, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let predicted = greedy_decode(policy, gold, vocab, max_len)?;
    let (accuracy, per_entity_accuracy) = answer_accuracy(&predicted, gold, vocab)?;
    let mut bleu_sum = [0.0; 4];
    let mut rouge_sum = 0.0;
    for (p, g) in predicted.iter().zip(gold) {
        let (c, r) = (reasoning_text(p), reasoning_text(g));
        for (s, b) in bleu_sum.iter_mut().zip(bleu4(&c, &r)?) {
            *s += b;
        }
        rouge_sum += rouge_l(&c, &r, rouge_beta)?;
    }
    let n = gold.len() as f64;
    Ok(EvalReport {
        n: gold.len(),
        accuracy,
        per_entity_accuracy,
        bleu: bleu_sum.map(|s| s / n),
        rouge_l: rouge_sum / n,
    })
}
