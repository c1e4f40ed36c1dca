//! Synthetic symbolic-diagnosis world and corpus files.
//!
//! Each sample draws a latent entity from the active regime's label
//! marginals, mentions a random subset of its associated attributes (plus an
//! occasional comorbid finding and negated noise), and encodes the asserted
//! attributes as observation codes `v<i>`. The factual trajectory lists the
//! findings in canonical (name) order and answers with the latent entity.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept_graph::{ConceptGraph, RelationKind};
use crate::trajectory::{
    parse_trajectory, render_trajectory, Context, Finding, PairRecord, PreferencePair, Trajectory,
    TrajectoryError, Vocab,
};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

pub const DEFAULT_PROMPT: &str = "diagnose";

/// Entities of the eight-entity demo world, most frequent first.
pub const DEMO_ENTITIES: [&str; 8] = [
    "pneumonia",
    "effusion",
    "cardiomegaly",
    "edema",
    "consolidation",
    "atelectasis",
    "pneumothorax",
    "nodule",
];

/// The demo pair whose associated attributes overlap.
pub const CONFUSABLE: [&str; 2] = ["pneumonia", "consolidation"];

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub graph: ConceptGraph,
    /// Label order for the marginal vectors.
    pub entities: Vec<String>,
    /// One probability vector over `entities` per regime.
    pub label_marginals: Vec<Vec<f64>>,
    /// Probability that a sample carries one negated spurious attribute.
    pub attribute_noise: f64,
    /// Maximum number of observation codes.
    pub observation_length: usize,
    /// Probability of a second entity contributing one finding.
    pub comorbidity_rate: f64,
    /// Probability that each associated attribute of the latent entity is
    /// mentioned (at least one always is).
    pub finding_rate: f64,
    /// Probability that a sample is guaranteed one attribute associated with
    /// no other entity of the world, when the entity has any.
    pub distinctive_rate: f64,
    pub prompt: Vec<String>,
}

/// Zipf weights `1 / rank^s`, normalized.
pub fn zipf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Moves `tv` probability mass from the most to the least likely label, so
/// the result is exactly `tv` away in total variation.
pub fn shift_marginals(p: &[f64], tv: f64) -> Result<Vec<f64>, CorpusError> {
    let (hi, &max) = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| CorpusError::Spec("empty marginals".into()))?;
    let lo = p
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty");
    if !(0.0..=max).contains(&tv) || (hi == lo && tv > 0.0) {
        return Err(CorpusError::Spec(format!("cannot shift by {tv}")));
    }
    let mut q = p.to_vec();
    q[hi] -= tv;
    q[lo] += tv;
    Ok(q)
}

impl WorldSpec {
    /// Eight demo entities, Zipf(1.2) marginals in regime 0 and each later
    /// regime shifted by `shift_tv` from the previous one.
    pub fn demo(regimes: usize, shift_tv: f64) -> Result<Self, CorpusError> {
        Self::zipf_world(&ConceptGraph::demo(), &DEMO_ENTITIES, regimes, shift_tv, 1.2)
    }

    /// `graph` restricted to `entities`, with Zipf(`exponent`) marginals in
    /// entity order for regime 0 and a `shift_tv` shift per later regime.
    pub fn zipf_world(
        graph: &ConceptGraph,
        entities: &[&str],
        regimes: usize,
        shift_tv: f64,
        exponent: f64,
    ) -> Result<Self, CorpusError> {
        let graph = graph
            .restrict(entities)
            .map_err(|e| CorpusError::Spec(e.to_string()))?;
        let mut label_marginals = vec![zipf(entities.len(), exponent)];
        for _ in 1..regimes.max(1) {
            let next = shift_marginals(label_marginals.last().expect("nonempty"), shift_tv)?;
            label_marginals.push(next);
        }
        Ok(Self {
            graph,
            entities: entities.iter().map(|s| s.to_string()).collect(),
            label_marginals,
            attribute_noise: 0.1,
            observation_length: 6,
            comorbidity_rate: 0.0,
            finding_rate: 0.6,
            distinctive_rate: 1.0,
            prompt: vec![DEFAULT_PROMPT.to_string()],
        })
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.entities.is_empty() {
            return bad("no entities".into());
        }
        for e in &self.entities {
            if !self.graph.has_entity(e) {
                return bad(format!("entity `{e}` is not in the graph"));
            }
        }
        if self.label_marginals.is_empty() {
            return bad("no regimes".into());
        }
        for (r, m) in self.label_marginals.iter().enumerate() {
            if m.len() != self.entities.len() {
                return bad(format!("regime {r} marginals have the wrong length"));
            }
            if m.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return bad(format!("regime {r} marginals are not a distribution"));
            }
        }
        for (name, p) in [
            ("attribute_noise", self.attribute_noise),
            ("comorbidity_rate", self.comorbidity_rate),
            ("finding_rate", self.finding_rate),
            ("distinctive_rate", self.distinctive_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.observation_length == 0 {
            return bad("observation_length must be positive".into());
        }
        let violations = self.graph.validate();
        if !violations.is_empty() {
            return bad(format!("graph is invalid: {}", violations[0]));
        }
        Ok(())
    }

    /// Attribute names in canonical order; `v<i>` codes index into it.
    pub fn attribute_names(&self) -> Vec<String> {
        self.graph.attributes().map(|a| a.name).collect()
    }

    fn observation_words(&self) -> Vec<String> {
        (0..self.graph.size().1).map(|i| format!("v{i}")).collect()
    }

    pub fn vocab(&self) -> Result<Vocab, CorpusError> {
        let mut extra = self.observation_words();
        extra.extend(self.prompt.iter().cloned());
        Ok(Vocab::from_graph(&self.graph, extra)?)
    }
}

/// One generated sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub trajectory: Trajectory,
    pub regime: u32,
}

impl SampleRecord {
    pub fn context(&self) -> &Context {
        &self.trajectory.context
    }
}

/// One line of the sample corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleLine {
    pub observation: String,
    pub prompt: String,
    pub trajectory: String,
    pub regime: u32,
}

impl SampleRecord {
    pub fn to_line(&self, vocab: &Vocab) -> SampleLine {
        SampleLine {
            observation: vocab.detokenize(&self.trajectory.context.observation),
            prompt: vocab.detokenize(&self.trajectory.context.prompt),
            trajectory: self.trajectory.render(vocab),
            regime: self.regime,
        }
    }

    pub fn from_line(line: &SampleLine, vocab: &Vocab) -> Result<Self, TrajectoryError> {
        let context = Context::new(vocab.tokenize(&line.observation)?, vocab.tokenize(&line.prompt)?);
        let trajectory = parse_trajectory(&context, &vocab.tokenize(&line.trajectory)?, vocab)?;
        Ok(Self {
            trajectory,
            regime: line.regime,
        })
    }
}

/// Draws one sample of `entity`.
fn sample_one<R: Rng>(
    spec: &WorldSpec,
    vocab: &Vocab,
    attrs: &[String],
    entity: usize,
    regime: usize,
    rng: &mut R,
) -> Result<SampleRecord, CorpusError> {
    let g = &spec.graph;
    let name = &spec.entities[entity];
    let assoc = g.associated_attributes(name).map_err(|e| CorpusError::Spec(e.to_string()))?;

    let mut present: BTreeSet<&str> = assoc
        .iter()
        .filter(|_| rng.gen::<f64>() < spec.finding_rate)
        .map(String::as_str)
        .collect();
    if rng.gen::<f64>() < spec.distinctive_rate {
        let distinctive: Vec<&String> = assoc
            .iter()
            .filter(|a| {
                spec.entities.iter().all(|other| {
                    other == name || g.relation_of(other, a).ok() != Some(RelationKind::Association)
                })
            })
            .collect();
        if !distinctive.iter().any(|a| present.contains(a.as_str())) {
            if let Some(a) = distinctive.choose(rng) {
                present.insert(a);
            }
        }
    }
    if present.is_empty() {
        if let Some(a) = assoc.choose(rng) {
            present.insert(a);
        }
    }

    if rng.gen::<f64>() < spec.comorbidity_rate {
        let weights = &spec.label_marginals[regime];
        let others: Vec<usize> = (0..spec.entities.len())
            .filter(|&j| j != entity && weights[j] > 0.0 && !g.are_exclusive(name, &spec.entities[j]))
            .collect();
        if let Ok(w) = WeightedIndex::new(others.iter().map(|&j| weights[j])) {
            let second = &spec.entities[others[w.sample(rng)]];
            let extra: Vec<String> = g
                .associated_attributes(second)
                .map_err(|e| CorpusError::Spec(e.to_string()))?
                .into_iter()
                .filter(|a| g.relation_of(name, a).ok() == Some(RelationKind::Irrelevance))
                .collect();
            if let Some(a) = extra.choose(rng) {
                present.insert(attrs.iter().find(|x| *x == a).expect("attribute in graph"));
            }
        }
    }

    let mut absent: Option<&str> = None;
    if rng.gen::<f64>() < spec.attribute_noise {
        let pool: Vec<&String> = attrs
            .iter()
            .filter(|a| !present.contains(a.as_str()) && !assoc.contains(a))
            .collect();
        absent = pool.choose(rng).map(|a| a.as_str());
    }

    let mut findings: Vec<Finding> = present.iter().map(|&a| Finding::present(a)).collect();
    if let Some(a) = absent {
        findings.push(Finding::absent(a));
    }
    findings.sort_by(|a, b| a.attribute.cmp(&b.attribute));

    let code = |a: &str| {
        let i = attrs.iter().position(|x| x == a).expect("attribute in graph");
        vocab.id(&format!("v{i}")).expect("observation code in vocab")
    };
    let observation: Vec<_> = present
        .iter()
        .take(spec.observation_length)
        .map(|&a| code(a))
        .collect();
    let prompt = spec
        .prompt
        .iter()
        .map(|w| vocab.id(w).expect("prompt word in vocab"))
        .collect();
    let context = Context::new(observation, prompt);
    let trajectory = render_trajectory(&context, &findings, name, vocab)?;
    Ok(SampleRecord {
        trajectory,
        regime: regime as u32,
    })
}

/// `n` samples from `regime`, deterministic in `seed`.
pub fn generate_regime(
    spec: &WorldSpec,
    regime: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>, CorpusError> {
    spec.validate()?;
    let marginals = spec
        .label_marginals
        .get(regime)
        .ok_or_else(|| CorpusError::Spec(format!("no regime {regime}")))?;
    let vocab = spec.vocab()?;
    let attrs = spec.attribute_names();
    let labels = WeightedIndex::new(marginals).map_err(|e| CorpusError::Spec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let e = labels.sample(&mut rng);
            sample_one(spec, &vocab, &attrs, e, regime, &mut rng)
        })
        .collect()
}

/// `n` samples split evenly across regimes in order (earlier regimes take
/// the remainder).
pub fn generate_world(spec: &WorldSpec, n: usize, seed: u64) -> Result<Vec<SampleRecord>, CorpusError> {
    spec.validate()?;
    let k = spec.label_marginals.len();
    let mut out = Vec::with_capacity(n);
    for r in 0..k {
        let count = n / k + usize::from(r < n % k);
        let regime_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(r as u64);
        out.extend(generate_regime(spec, r, count, regime_seed)?);
    }
    Ok(out)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_lines<T: Serialize>(items: impl Iterator<Item = T>, path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).map_err(|e| io_err(path, e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Parses each nonblank line; errors carry 1-based line numbers.
fn read_lines<T, U, F>(path: &Path, convert: F) -> Result<Vec<U>, CorpusError>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> Result<U, TrajectoryError>,
{
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| CorpusError::Schema {
            line: i + 1,
            message,
        };
        let raw: T = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        out.push(convert(&raw).map_err(|e| schema(e.to_string()))?);
    }
    Ok(out)
}

pub fn save_samples(samples: &[SampleRecord], vocab: &Vocab, path: &Path) -> Result<(), CorpusError> {
    write_lines(samples.iter().map(|s| s.to_line(vocab)), path)
}

pub fn load_samples(path: &Path, vocab: &Vocab) -> Result<Vec<SampleRecord>, CorpusError> {
    read_lines(path, |l: &SampleLine| SampleRecord::from_line(l, vocab))
}

pub fn save_pairs(pairs: &[PreferencePair], vocab: &Vocab, path: &Path) -> Result<(), CorpusError> {
    write_lines(pairs.iter().map(|p| p.to_record(vocab)), path)
}

pub fn load_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<PreferencePair>, CorpusError> {
    read_lines(path, |r: &PairRecord| PreferencePair::from_record(r, vocab))
}
