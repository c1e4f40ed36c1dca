//! Rule-based counterfactual trajectories.
//!
//! A factual report for entity `s` is rewritten toward a target entity `t`
//! by editing only graph-licensed findings: target-associated attributes are
//! asserted, target-excluded attributes are negated, everything else is
//! carried over verbatim, and the answer label is flipped.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::concept_graph::{ConceptGraph, GraphError, RelationKind};
use crate::trajectory::{
    render_trajectory, Finding, Phrasebook, Polarity, PreferencePair, Trajectory, TrajectoryError,
    Vocab,
};

#[derive(Debug, thiserror::Error)]
pub enum CounterfactualError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("target `{0}` equals the factual answer")]
    DegenerateTarget(String),
    #[error("plan does not fit the factual trajectory: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationPlan {
    /// Mentioned attributes irrelevant to both source and target.
    pub keep: BTreeSet<String>,
    /// Target-associated attributes not asserted in the factual report.
    pub insert: BTreeSet<String>,
    /// Target-excluded attributes asserted in the factual report.
    pub negate_or_remove: BTreeSet<String>,
    pub source: String,
    pub flip_answer: String,
}

/// Deterministic per-record seed: first 8 bytes of SHA-256 over both words.
pub fn record_seed(global_seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Graph, vocabulary and phrasebook bundled for repeated perturbation.
#[derive(Debug, Clone)]
pub struct Perturber<'a> {
    graph: &'a ConceptGraph,
    vocab: &'a Vocab,
    phrasebook: Phrasebook,
}

impl<'a> Perturber<'a> {
    pub fn new(graph: &'a ConceptGraph, vocab: &'a Vocab) -> Result<Self, CounterfactualError> {
        Ok(Self {
            graph,
            vocab,
            phrasebook: Phrasebook::new(graph, vocab)?,
        })
    }

    pub fn source_of(&self, factual: &Trajectory) -> Result<String, CounterfactualError> {
        let word = self.vocab.word(factual.answer);
        if !self.vocab.is_label(factual.answer) || !self.graph.has_entity(word) {
            return Err(CounterfactualError::UnknownEntity(word.to_string()));
        }
        Ok(word.to_string())
    }

    pub fn findings(&self, t: &Trajectory) -> Result<Vec<Finding>, CounterfactualError> {
        Ok(self.phrasebook.segment(&t.thinking)?)
    }

    pub fn plan(
        &self,
        factual: &Trajectory,
        target: &str,
        seed: u64,
    ) -> Result<PerturbationPlan, CounterfactualError> {
        if !self.graph.has_entity(target) || self.vocab.label_of(target).is_none() {
            return Err(CounterfactualError::UnknownEntity(target.to_string()));
        }
        let source = self.source_of(factual)?;
        if source == target {
            return Err(CounterfactualError::DegenerateTarget(target.to_string()));
        }
        let findings = self.findings(factual)?;
        let asserted: BTreeSet<&str> = findings
            .iter()
            .filter(|f| f.polarity == Polarity::Present)
            .map(|f| f.attribute.as_str())
            .collect();

        let associated = self.graph.associated_attributes(target)?;
        let mut candidates: Vec<&String> = associated
            .iter()
            .filter(|a| !asserted.contains(a.as_str()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let insert = if associated.is_empty() {
            BTreeSet::new()
        } else {
            let count = rng.gen_range(1..=associated.len()).min(candidates.len());
            candidates.shuffle(&mut rng);
            candidates.truncate(count);
            candidates.into_iter().cloned().collect()
        };

        let mut negate_or_remove = BTreeSet::new();
        let mut keep = BTreeSet::new();
        for f in &findings {
            let to_target = self.graph.relation_of(target, &f.attribute)?;
            let to_source = self.graph.relation_of(&source, &f.attribute)?;
            if f.polarity == Polarity::Present && to_target == RelationKind::Exclusion {
                negate_or_remove.insert(f.attribute.clone());
            } else if to_target == RelationKind::Irrelevance && to_source == RelationKind::Irrelevance
            {
                keep.insert(f.attribute.clone());
            }
        }
        Ok(PerturbationPlan {
            keep,
            insert,
            negate_or_remove,
            source,
            flip_answer: target.to_string(),
        })
    }

    /// Rewrites the factual thinking segment according to `plan`.
    ///
    /// Excluded findings are negated in place. An inserted attribute that the
    /// factual report mentions as absent is flipped in place; the others are
    /// merged before the first finding that sorts after them, so sorted
    /// reports stay sorted.
    pub fn apply(
        &self,
        plan: &PerturbationPlan,
        factual: &Trajectory,
    ) -> Result<Trajectory, CounterfactualError> {
        if let Some(a) = plan.insert.intersection(&plan.negate_or_remove).next() {
            return Err(CounterfactualError::InvalidPlan(format!(
                "`{a}` is both inserted and negated"
            )));
        }
        let findings = self.findings(factual)?;
        let mut out: Vec<Finding> = Vec::with_capacity(findings.len() + plan.insert.len());
        let mut pending: BTreeSet<&str> = plan.insert.iter().map(String::as_str).collect();
        for f in &findings {
            if pending.remove(f.attribute.as_str()) {
                if f.polarity == Polarity::Present {
                    return Err(CounterfactualError::InvalidPlan(format!(
                        "`{}` is already asserted",
                        f.attribute
                    )));
                }
                out.push(Finding::present(&f.attribute));
            } else if plan.negate_or_remove.contains(&f.attribute) {
                out.push(Finding::absent(&f.attribute));
            } else {
                out.push(f.clone());
            }
        }
        // remaining insertions go in at their sorted position
        for a in pending {
            let at = out
                .iter()
                .position(|f| f.attribute.as_str() > a)
                .unwrap_or(out.len());
            out.insert(at, Finding::present(a));
        }
        Ok(render_trajectory(
            &factual.context,
            &out,
            &plan.flip_answer,
            self.vocab,
        )?)
    }

    pub fn generate_pair(
        &self,
        factual: &Trajectory,
        target: &str,
        seed: u64,
    ) -> Result<PreferencePair, CounterfactualError> {
        let plan = self.plan(factual, target, seed)?;
        let counterfactual = self.apply(&plan, factual)?;
        Ok(PreferencePair::new(
            factual.clone(),
            counterfactual,
            plan.source,
            plan.flip_answer,
        )?)
    }

    /// Entities that can serve as a target for `factual`, sorted.
    pub fn valid_targets(&self, factual: &Trajectory) -> Result<Vec<String>, CounterfactualError> {
        let source = self.source_of(factual)?;
        Ok(self
            .graph
            .entities()
            .filter(|&e| e != source && self.vocab.label_of(e).is_some())
            .map(str::to_string)
            .collect())
    }

    /// Pairs for every record against every valid target (in sorted target
    /// order). Record `i` draws from `record_seed(global_seed, i)`.
    pub fn generate_all(
        &self,
        factuals: &[Trajectory],
        global_seed: u64,
    ) -> Result<Vec<PreferencePair>, CounterfactualError> {
        let per_record = factuals
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = ChaCha8Rng::seed_from_u64(record_seed(global_seed, i as u64));
                self.valid_targets(t)?
                    .iter()
                    .map(|target| self.generate_pair(t, target, rng.gen()))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(per_record.into_iter().flatten().collect())
    }
}

pub fn plan_perturbation(
    graph: &ConceptGraph,
    vocab: &Vocab,
    factual: &Trajectory,
    target: &str,
    seed: u64,
) -> Result<PerturbationPlan, CounterfactualError> {
    Perturber::new(graph, vocab)?.plan(factual, target, seed)
}

pub fn apply_plan(
    graph: &ConceptGraph,
    vocab: &Vocab,
    plan: &PerturbationPlan,
    factual: &Trajectory,
) -> Result<Trajectory, CounterfactualError> {
    Perturber::new(graph, vocab)?.apply(plan, factual)
}

pub fn generate_pair(
    graph: &ConceptGraph,
    vocab: &Vocab,
    factual: &Trajectory,
    target: &str,
    seed: u64,
) -> Result<PreferencePair, CounterfactualError> {
    Perturber::new(graph, vocab)?.generate_pair(factual, target, seed)
}
