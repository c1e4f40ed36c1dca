//! Closed-vocabulary tokenization and the chain-of-thought trajectory shape.
//!
//! A trajectory body is always
//! `<think> finding* </think> answer <eos>`, where each finding is an
//! attribute phrase, optionally prefixed by `no` when the attribute is
//! reported absent. Context tokens (observation then prompt) precede the
//! body and are conditioned on, never scored.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concept_graph::ConceptGraph;

pub type Token = u32;

pub const PAD: Token = 0;
pub const THINK: Token = 1;
pub const END_THINK: Token = 2;
pub const EOS: Token = 3;
pub const NEGATION: Token = 4;

pub const PAD_STR: &str = "<pad>";
pub const THINK_STR: &str = "<think>";
pub const END_THINK_STR: &str = "</think>";
pub const EOS_STR: &str = "<eos>";
pub const NEGATION_STR: &str = "no";

/// Separates observation from prompt words in a serialized context.
pub const CONTEXT_SEPARATOR: &str = "|";

/// Default upper bound on the body length (`<think>` through `<eos>`).
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("trajectory body of {len} tokens exceeds limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("`{0}` is not an answer label")]
    NotALabel(String),
    #[error("thinking tokens do not segment into findings at position {0}")]
    Unsegmentable(usize),
    #[error("preference pair invariant violated: {0}")]
    BadPair(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
}

/// Ordered closed vocabulary. Index 0 is `<pad>`; the four delimiters and
/// the negation word follow, then one answer label per entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
    /// Label token per entity, in entity order.
    labels: Vec<Token>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    labels: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = TrajectoryError;

    fn try_from(r: VocabRepr) -> Result<Self, Self::Error> {
        let expected = [PAD_STR, THINK_STR, END_THINK_STR, EOS_STR, NEGATION_STR];
        if r.tokens.len() < expected.len()
            || r.tokens[..expected.len()].iter().zip(expected).any(|(a, b)| a != b)
        {
            return Err(TrajectoryError::Vocab("missing reserved prefix".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in r.tokens.iter().enumerate() {
            if index.insert(t.clone(), i as Token).is_some() {
                return Err(TrajectoryError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let labels = r
            .labels
            .iter()
            .map(|l| {
                index
                    .get(l)
                    .copied()
                    .filter(|&t| t > NEGATION)
                    .ok_or_else(|| TrajectoryError::NotALabel(l.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Vocab {
            tokens: r.tokens,
            index,
            labels,
        })
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            labels: v.labels.iter().map(|&t| v.tokens[t as usize].clone()).collect(),
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    /// Builds a vocabulary from answer labels and free words. Labels and
    /// words may overlap; every string gets one index.
    pub fn new<L, W>(labels: L, words: W) -> Result<Self, TrajectoryError>
    where
        L: IntoIterator,
        L::Item: AsRef<str>,
        W: IntoIterator,
        W::Item: AsRef<str>,
    {
        let mut tokens: Vec<String> = [PAD_STR, THINK_STR, END_THINK_STR, EOS_STR, NEGATION_STR]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut label_names = Vec::new();
        for l in labels {
            let l = l.as_ref();
            if l.is_empty() || l.split_whitespace().count() != 1 {
                return Err(TrajectoryError::Vocab(format!("label `{l}` is not a single word")));
            }
            if label_names.iter().any(|x: &String| x == l) {
                return Err(TrajectoryError::Vocab(format!("duplicate label `{l}`")));
            }
            label_names.push(l.to_string());
        }
        let mut rest: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .chain(label_names.iter().cloned())
            .filter(|w| !tokens.contains(w))
            .collect();
        rest.sort();
        rest.dedup();
        if rest.iter().any(|w| w.split_whitespace().count() != 1 || w == CONTEXT_SEPARATOR) {
            return Err(TrajectoryError::Vocab("words must be single non-reserved tokens".into()));
        }
        tokens.extend(rest);
        Vocab::try_from(VocabRepr {
            tokens,
            labels: label_names,
        })
    }

    /// Vocabulary covering every entity label and attribute word of `graph`
    /// plus `extra` words (observation codes, prompt words).
    pub fn from_graph<W>(graph: &ConceptGraph, extra: W) -> Result<Self, TrajectoryError>
    where
        W: IntoIterator,
        W::Item: AsRef<str>,
    {
        let mut words: Vec<String> = graph
            .attributes()
            .flat_map(|a| a.name.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        words.extend(extra.into_iter().map(|w| w.as_ref().to_string()));
        Vocab::new(graph.entities(), words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    pub fn word(&self, token: Token) -> &str {
        &self.tokens[token as usize]
    }

    pub fn labels(&self) -> &[Token] {
        &self.labels
    }

    pub fn label_of(&self, entity: &str) -> Option<Token> {
        self.id(entity).filter(|t| self.labels.contains(t))
    }

    /// Position of `token` among the answer labels.
    pub fn label_position(&self, token: Token) -> Option<usize> {
        self.labels.iter().position(|&t| t == token)
    }

    pub fn is_label(&self, token: Token) -> bool {
        self.labels.contains(&token)
    }

    /// Hex SHA-256 over tokens and labels; identifies the vocabulary in
    /// checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        hex_string(&h.finalize())
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>, TrajectoryError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| TrajectoryError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Observation (`v`) and prompt (`l`) tokens preceding the body.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Context {
    pub observation: Vec<Token>,
    pub prompt: Vec<Token>,
}

impl Context {
    pub fn new(observation: Vec<Token>, prompt: Vec<Token>) -> Self {
        Self {
            observation,
            prompt,
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        let mut out = self.observation.clone();
        out.extend_from_slice(&self.prompt);
        out
    }

    /// `observation words | prompt words`
    pub fn render(&self, vocab: &Vocab) -> String {
        let obs = vocab.detokenize(&self.observation);
        let prompt = vocab.detokenize(&self.prompt);
        [obs.as_str(), CONTEXT_SEPARATOR, prompt.as_str()]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self, TrajectoryError> {
        let (obs, prompt) = text.split_once(CONTEXT_SEPARATOR).ok_or_else(|| {
            TrajectoryError::Malformed(format!("context lacks `{CONTEXT_SEPARATOR}`"))
        })?;
        Ok(Self::new(vocab.tokenize(obs)?, vocab.tokenize(prompt)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Present,
    Absent,
}

/// One attribute mention inside the thinking segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Finding {
    pub attribute: String,
    pub polarity: Polarity,
}

impl Finding {
    pub fn present(attribute: impl Into<String>) -> Self {
        Self {
            attribute: attribute.into(),
            polarity: Polarity::Present,
        }
    }

    pub fn absent(attribute: impl Into<String>) -> Self {
        Self {
            attribute: attribute.into(),
            polarity: Polarity::Absent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub context: Context,
    pub thinking: Vec<Token>,
    pub answer: Token,
}

impl Trajectory {
    /// `<think> thinking </think> answer <eos>`
    pub fn raw(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.thinking.len() + 4);
        out.push(THINK);
        out.extend_from_slice(&self.thinking);
        out.push(END_THINK);
        out.push(self.answer);
        out.push(EOS);
        out
    }

    pub fn len(&self) -> usize {
        self.thinking.len() + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        vocab.detokenize(&self.raw())
    }
}

/// Renders findings into the fixed report template.
pub fn render_trajectory(
    context: &Context,
    findings: &[Finding],
    answer: &str,
    vocab: &Vocab,
) -> Result<Trajectory, TrajectoryError> {
    let answer = vocab
        .label_of(answer)
        .ok_or_else(|| TrajectoryError::NotALabel(answer.to_string()))?;
    let mut thinking = Vec::new();
    for f in findings {
        if f.polarity == Polarity::Absent {
            thinking.push(NEGATION);
        }
        thinking.extend(vocab.tokenize(&f.attribute)?);
    }
    let t = Trajectory {
        context: context.clone(),
        thinking,
        answer,
    };
    if t.len() > DEFAULT_MAX_LEN {
        return Err(TrajectoryError::TooLong {
            len: t.len(),
            max: DEFAULT_MAX_LEN,
        });
    }
    Ok(t)
}

/// Inverse of [`Trajectory::raw`]; checks the delimiter grammar.
pub fn parse_trajectory(
    context: &Context,
    raw: &[Token],
    vocab: &Vocab,
) -> Result<Trajectory, TrajectoryError> {
    let bad = |m: &str| Err(TrajectoryError::Malformed(m.to_string()));
    if let Some(&t) = raw.iter().find(|&&t| t as usize >= vocab.len()) {
        return Err(TrajectoryError::UnknownToken(format!("#{t}")));
    }
    if raw.first() != Some(&THINK) {
        return bad("body must start with <think>");
    }
    if raw.last() != Some(&EOS) {
        return bad("body must end with <eos>");
    }
    let count = |tok: Token| raw.iter().filter(|&&t| t == tok).count();
    if count(THINK) != 1 {
        return bad("expected exactly one <think>");
    }
    if count(EOS) != 1 {
        return bad("expected exactly one <eos>");
    }
    if count(PAD) != 0 {
        return bad("<pad> inside body");
    }
    let close = match raw.iter().position(|&t| t == END_THINK) {
        Some(p) if count(END_THINK) == 1 => p,
        Some(_) => return bad("expected exactly one </think>"),
        None => return bad("missing </think>"),
    };
    let answers = &raw[close + 1..raw.len() - 1];
    if answers.len() != 1 {
        return bad("expected exactly one answer after </think>");
    }
    if !vocab.is_label(answers[0]) {
        return Err(TrajectoryError::NotALabel(vocab.word(answers[0]).to_string()));
    }
    if raw.len() > DEFAULT_MAX_LEN {
        return Err(TrajectoryError::TooLong {
            len: raw.len(),
            max: DEFAULT_MAX_LEN,
        });
    }
    Ok(Trajectory {
        context: context.clone(),
        thinking: raw[1..close].to_vec(),
        answer: answers[0],
    })
}

/// Splits thinking tokens back into findings by longest phrase match.
#[derive(Debug, Clone)]
pub struct Phrasebook {
    // token sequence -> attribute name
    phrases: HashMap<Vec<Token>, String>,
    longest: usize,
}

impl Phrasebook {
    pub fn new(graph: &ConceptGraph, vocab: &Vocab) -> Result<Self, TrajectoryError> {
        let mut phrases = HashMap::new();
        let mut longest = 0;
        for a in graph.attributes() {
            let toks = vocab.tokenize(&a.name)?;
            if toks.first() == Some(&NEGATION) {
                return Err(TrajectoryError::Vocab(format!(
                    "attribute `{}` starts with the negation word",
                    a.name
                )));
            }
            longest = longest.max(toks.len());
            phrases.insert(toks, a.name);
        }
        Ok(Self { phrases, longest })
    }

    pub fn segment(&self, thinking: &[Token]) -> Result<Vec<Finding>, TrajectoryError> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < thinking.len() {
            let start = i;
            let polarity = if thinking[i] == NEGATION {
                i += 1;
                Polarity::Absent
            } else {
                Polarity::Present
            };
            let max = self.longest.min(thinking.len() - i);
            let hit = (1..=max)
                .rev()
                .find_map(|n| self.phrases.get(&thinking[i..i + n]).map(|a| (n, a)));
            match hit {
                Some((n, attribute)) => {
                    out.push(Finding {
                        attribute: attribute.clone(),
                        polarity,
                    });
                    i += n;
                }
                None => return Err(TrajectoryError::Unsegmentable(start)),
            }
        }
        Ok(out)
    }
}

/// (context, preferred t+, counterfactual t-) with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub preferred: Trajectory,
    pub counterfactual: Trajectory,
    pub source_entity: String,
    pub target_entity: String,
}

impl PreferencePair {
    pub fn new(
        preferred: Trajectory,
        counterfactual: Trajectory,
        source_entity: impl Into<String>,
        target_entity: impl Into<String>,
    ) -> Result<Self, TrajectoryError> {
        if preferred.context != counterfactual.context {
            return Err(TrajectoryError::BadPair("contexts differ".into()));
        }
        if preferred.answer == counterfactual.answer {
            return Err(TrajectoryError::BadPair("answers coincide".into()));
        }
        Ok(Self {
            preferred,
            counterfactual,
            source_entity: source_entity.into(),
            target_entity: target_entity.into(),
        })
    }

    pub fn context(&self) -> &Context {
        &self.preferred.context
    }

    pub fn to_record(&self, vocab: &Vocab) -> PairRecord {
        PairRecord {
            context: self.context().render(vocab),
            preferred: self.preferred.render(vocab),
            counterfactual: self.counterfactual.render(vocab),
            source_entity: self.source_entity.clone(),
            target_entity: self.target_entity.clone(),
        }
    }

    pub fn from_record(record: &PairRecord, vocab: &Vocab) -> Result<Self, TrajectoryError> {
        let context = Context::parse(&record.context, vocab)?;
        let preferred = parse_trajectory(&context, &vocab.tokenize(&record.preferred)?, vocab)?;
        let counterfactual =
            parse_trajectory(&context, &vocab.tokenize(&record.counterfactual)?, vocab)?;
        PreferencePair::new(
            preferred,
            counterfactual,
            &record.source_entity,
            &record.target_entity,
        )
    }
}

/// One line of the pair corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub context: String,
    pub preferred: String,
    pub counterfactual: String,
    pub source_entity: String,
    pub target_entity: String,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Present => f.write_str("present"),
            Polarity::Absent => f.write_str("absent"),
        }
    }
}
