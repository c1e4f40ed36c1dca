//! Fixed-window autoregressive token policy.
//!
//! The next-token distribution is computed from the last `k` tokens of
//! `context ∘ body[..j]` (left-padded with `<pad>`):
//!
//! ```text
//! x      = concat(E[w_1], ..., E[w_k])          k·d_e
//! h      = tanh(x · W1 + b1)                    d_h
//! logits = h · W2 + b2                          |V|
//! ```
//!
//! All arithmetic is f64. Gradients are derived by hand and checked against
//! central finite differences in the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::trajectory::{Context, Token, Trajectory, Vocab, END_THINK, EOS, PAD, THINK};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vocabulary mismatch: checkpoint has {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    /// Context window length `k`.
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            window: 8,
            embed_dim: 16,
            hidden_dim: 64,
        }
    }
}

/// The five parameter buffers, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// |V| × d_e
    pub embedding: Vec<f64>,
    /// (k·d_e) × d_h
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// d_h × |V|
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl Weights {
    fn zeros(vocab_size: usize, h: Hyper) -> Self {
        Self {
            embedding: vec![0.0; vocab_size * h.embed_dim],
            hidden_weights: vec![0.0; h.window * h.embed_dim * h.hidden_dim],
            hidden_bias: vec![0.0; h.hidden_dim],
            output_weights: vec![0.0; h.hidden_dim * vocab_size],
            output_bias: vec![0.0; vocab_size],
        }
    }

    pub fn buffers(&self) -> [&[f64]; 5] {
        [
            &self.embedding,
            &self.hidden_weights,
            &self.hidden_bias,
            &self.output_weights,
            &self.output_bias,
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embedding,
            &mut self.hidden_weights,
            &mut self.hidden_bias,
            &mut self.output_weights,
            &mut self.output_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat iteration in buffer order.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.buffers().into_iter().flat_map(|b| b.iter().copied())
    }

    fn slot(&mut self, mut i: usize) -> &mut f64 {
        for b in self.buffers_mut() {
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn get(&self, mut i: usize) -> f64 {
        for b in self.buffers() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn set(&mut self, i: usize, value: f64) {
        *self.slot(i) = value;
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// self += scale · other
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub hyper: Hyper,
    pub vocab_size: usize,
    pub weights: Weights,
}

/// ∂L/∂params, same layout as [`PolicyParams::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub weights: Weights,
}

impl PolicyGradient {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Self {
            weights: Weights::zeros(p.vocab_size, p.hyper),
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights.norm()
    }

    pub fn add_scaled(&mut self, other: &PolicyGradient, scale: f64) {
        self.weights.add_scaled(&other.weights, scale);
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.scale(factor);
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|x| x == 0.0)
    }
}

/// Activations of one forward step, kept for the backward pass.
struct Step {
    window: Vec<Token>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Last `k` tokens of `history`, left-padded with `<pad>`.
pub fn window_of(history: &[Token], k: usize) -> Vec<Token> {
    let mut w = vec![PAD; k.saturating_sub(history.len())];
    w.extend_from_slice(&history[history.len().saturating_sub(k)..]);
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, hyper: Hyper) -> Self {
        Self {
            hyper,
            vocab_size,
            weights: Weights::zeros(vocab_size, hyper),
        }
    }

    /// Uniform in [-scale, scale] from a seeded generator.
    pub fn init_uniform(vocab_size: usize, hyper: Hyper, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(vocab_size, hyper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in p.weights.buffers_mut() {
            for x in b.iter_mut() {
                *x = rng.gen_range(-scale..=scale);
            }
        }
        p
    }

    /// Default initialization, uniform in [-0.05, 0.05].
    pub fn init(vocab_size: usize, hyper: Hyper, seed: u64) -> Self {
        Self::init_uniform(vocab_size, hyper, seed, 0.05)
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn check_window(&self, window: &[Token]) -> Result<(), PolicyError> {
        if window.len() != self.hyper.window {
            return Err(PolicyError::ShapeMismatch(format!(
                "window of {} tokens, expected {}",
                window.len(),
                self.hyper.window
            )));
        }
        if let Some(&t) = window.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(PolicyError::ShapeMismatch(format!(
                "token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn forward(&self, window: &[Token]) -> Step {
        let Hyper {
            embed_dim: de,
            hidden_dim: dh,
            ..
        } = self.hyper;
        let v = self.vocab_size;
        let w = &self.weights;

        let mut input = Vec::with_capacity(window.len() * de);
        for &t in window {
            let row = t as usize * de;
            input.extend_from_slice(&w.embedding[row..row + de]);
        }

        let mut hidden = w.hidden_bias.clone();
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &w.hidden_weights[i * dh..(i + 1) * dh];
            for (h, &wij) in hidden.iter_mut().zip(row) {
                *h += x * wij;
            }
        }
        hidden.iter_mut().for_each(|h| *h = h.tanh());

        let mut logits = w.output_bias.clone();
        for (j, &h) in hidden.iter().enumerate() {
            let row = &w.output_weights[j * v..(j + 1) * v];
            for (l, &wjv) in logits.iter_mut().zip(row) {
                *l += h * wjv;
            }
        }

        Step {
            window: window.to_vec(),
            input,
            hidden,
            log_probs: log_softmax(&logits),
            logits,
        }
    }

    /// Unnormalized next-token scores for a `k`-token window.
    pub fn logits(&self, window: &[Token]) -> Result<Vec<f64>, PolicyError> {
        self.check_window(window)?;
        Ok(self.forward(window).logits)
    }

    /// Next-token log-distribution after `history`.
    pub fn next_log_probs(&self, history: &[Token]) -> Result<Vec<f64>, PolicyError> {
        let window = window_of(history, self.hyper.window);
        self.check_window(&window)?;
        Ok(self.forward(&window).log_probs)
    }

    /// Σ_j log π(tokens[j] | context ∘ tokens[..j]).
    pub fn sequence_logprob(&self, context: &[Token], tokens: &[Token]) -> Result<f64, PolicyError> {
        Ok(self.token_logprobs(context, tokens)?.iter().sum())
    }

    /// Per-position log-probabilities of `tokens`.
    pub fn token_logprobs(&self, context: &[Token], tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
        let mut history = context.to_vec();
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(PolicyError::ShapeMismatch(format!("token {t} outside vocabulary")));
            }
            let lp = self.next_log_probs(&history)?;
            out.push(lp[t as usize]);
            history.push(t);
        }
        Ok(out)
    }

    /// Log-probability of the full trajectory body, conditioned on its context.
    pub fn trajectory_logprob(&self, t: &Trajectory) -> Result<f64, PolicyError> {
        self.sequence_logprob(&t.context.tokens(), &t.raw())
    }

    /// Adds ∂(weight · Σ_j log π(tokens[j] | ...))/∂θ into `grad`.
    pub fn accumulate_backward(
        &self,
        context: &[Token],
        tokens: &[Token],
        weight: f64,
        grad: &mut PolicyGradient,
    ) -> Result<(), PolicyError> {
        if grad.weights.len() != self.weights.len() {
            return Err(PolicyError::ShapeMismatch("gradient buffer layout".into()));
        }
        if weight == 0.0 {
            return Ok(());
        }
        let Hyper {
            window: k,
            embed_dim: de,
            hidden_dim: dh,
        } = self.hyper;
        let v = self.vocab_size;
        let w = &self.weights;
        let g = &mut grad.weights;

        let mut history = context.to_vec();
        let mut d_hidden = vec![0.0; dh];
        let mut d_input = vec![0.0; k * de];
        for &target in tokens {
            if target as usize >= v {
                return Err(PolicyError::ShapeMismatch(format!("token {target} outside vocabulary")));
            }
            let window = window_of(&history, k);
            self.check_window(&window)?;
            let step = self.forward(&window);
            history.push(target);

            // d(weight · log p_target)/d logits = weight · (onehot − p)
            let d_logits: Vec<f64> = step
                .log_probs
                .iter()
                .enumerate()
                .map(|(i, lp)| {
                    let onehot = if i == target as usize { 1.0 } else { 0.0 };
                    weight * (onehot - lp.exp())
                })
                .collect();

            for (gb, d) in g.output_bias.iter_mut().zip(&d_logits) {
                *gb += d;
            }
            for (j, &h) in step.hidden.iter().enumerate().take(dh) {
                let row_w = &w.output_weights[j * v..(j + 1) * v];
                let row_g = &mut g.output_weights[j * v..(j + 1) * v];
                let mut acc = 0.0;
                for ((gw, &ww), &d) in row_g.iter_mut().zip(row_w).zip(&d_logits) {
                    *gw += h * d;
                    acc += ww * d;
                }
                // through tanh
                d_hidden[j] = acc * (1.0 - h * h);
            }

            for (gb, d) in g.hidden_bias.iter_mut().zip(&d_hidden) {
                *gb += d;
            }
            for (i, &x) in step.input.iter().enumerate() {
                let row_w = &w.hidden_weights[i * dh..(i + 1) * dh];
                let row_g = &mut g.hidden_weights[i * dh..(i + 1) * dh];
                let mut acc = 0.0;
                for ((gw, &ww), &d) in row_g.iter_mut().zip(row_w).zip(&d_hidden) {
                    *gw += x * d;
                    acc += ww * d;
                }
                d_input[i] = acc;
            }

            for (pos, &tok) in step.window.iter().enumerate() {
                let row = tok as usize * de;
                for e in 0..de {
                    g.embedding[row + e] += d_input[pos * de + e];
                }
            }
        }
        Ok(())
    }

    /// ∂(weight · sequence_logprob)/∂θ for a trajectory body.
    pub fn backward(&self, t: &Trajectory, weight: f64) -> Result<PolicyGradient, PolicyError> {
        let mut grad = PolicyGradient::zeros_like(self);
        self.accumulate_backward(&t.context.tokens(), &t.raw(), weight, &mut grad)?;
        Ok(grad)
    }

    /// Samples a complete trajectory. `<think>` is forced first; the body is
    /// capped at `max_len` tokens by forcing `</think> answer <eos>`.
    pub fn sample(
        &self,
        context: &Context,
        vocab: &Vocab,
        seed: u64,
        max_len: usize,
        decoding: Decoding,
    ) -> Result<Trajectory, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.continue_from(context, &[THINK], vocab, &mut rng, max_len, decoding)
    }

    /// Continues a body prefix that starts with `<think>` and may already end
    /// with `</think>`.
    pub fn continue_from<R: Rng>(
        &self,
        context: &Context,
        prefix: &[Token],
        vocab: &Vocab,
        rng: &mut R,
        max_len: usize,
        decoding: Decoding,
    ) -> Result<Trajectory, PolicyError> {
        if prefix.first() != Some(&THINK) {
            return Err(PolicyError::ShapeMismatch("prefix must start with <think>".into()));
        }
        let mut history = context.tokens();
        history.extend_from_slice(prefix);
        let mut thinking: Vec<Token> = prefix[1..].to_vec();
        let mut closed = thinking.last() == Some(&END_THINK);
        if closed {
            thinking.pop();
        }
        // Room left for free tokens before `</think> answer <eos>` is forced.
        let budget = max_len.saturating_sub(3);
        while !closed {
            if thinking.len() + 1 >= budget {
                break;
            }
            let lp = self.next_log_probs(&history)?;
            let allowed = |t: Token| !matches!(t, PAD | THINK | EOS);
            let next = choose(&lp, allowed, decoding, rng);
            history.push(next);
            if next == END_THINK {
                closed = true;
            } else {
                thinking.push(next);
            }
        }
        if !closed {
            history.push(END_THINK);
        }
        let lp = self.next_log_probs(&history)?;
        let answer = choose(&lp, |t| vocab.is_label(t), decoding, rng);
        Ok(Trajectory {
            context: context.clone(),
            thinking,
            answer,
        })
    }
}

fn choose<R: Rng>(
    log_probs: &[f64],
    allowed: impl Fn(Token) -> bool,
    decoding: Decoding,
    rng: &mut R,
) -> Token {
    let candidates = log_probs
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i as Token));
    match decoding {
        Decoding::Greedy => {
            let mut best = (Token::MAX, f64::NEG_INFINITY);
            for (i, &lp) in candidates {
                if lp > best.1 {
                    best = (i as Token, lp);
                }
            }
            best.0
        }
        Decoding::Sample { temperature } => {
            let t = temperature.max(1e-12);
            let scaled: Vec<(Token, f64)> = candidates.map(|(i, &lp)| (i as Token, lp / t)).collect();
            let max = scaled.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scaled.iter().map(|x| (x.1 - max).exp()).sum();
            let mut u = rng.gen::<f64>() * total;
            for &(tok, s) in &scaled {
                u -= (s - max).exp();
                if u <= 0.0 {
                    return tok;
                }
            }
            scaled.last().expect("nonempty candidate set").0
        }
    }
}

/// Versioned checkpoint: parameters plus the vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab_hash: String,
    pub vocab: Vocab,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, vocab: &Vocab) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab.hash(),
            vocab: vocab.clone(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses a checkpoint; when `expected` is given, rejects a differing
    /// vocabulary hash.
    pub fn from_json(text: &str, expected: Option<&Vocab>) -> Result<Self, PolicyError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| PolicyError::Format(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Format(format!("unsupported version {}", ck.version)));
        }
        if ck.vocab.hash() != ck.vocab_hash {
            return Err(PolicyError::Format("embedded vocabulary does not match its hash".into()));
        }
        if let Some(v) = expected {
            if v.hash() != ck.vocab_hash {
                return Err(PolicyError::VocabMismatch {
                    expected: v.hash(),
                    found: ck.vocab_hash,
                });
            }
        }
        let p = &ck.params;
        let shape = PolicyParams::zeros(p.vocab_size, p.hyper);
        let ok = p.vocab_size == ck.vocab.len()
            && shape
                .weights
                .buffers()
                .iter()
                .zip(p.weights.buffers())
                .all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(PolicyError::ShapeMismatch("checkpoint buffers".into()));
        }
        if !p.weights.is_finite() {
            return Err(PolicyError::Format("non-finite parameter".into()));
        }
        Ok(ck)
    }
}
