//! Plausibility of generated counterfactuals on random well-formed graphs.

use std::collections::BTreeSet;

use cpo_core::concept_graph::{Category, ConceptGraph, RelationKind};
use cpo_core::counterfactual::Perturber;
use cpo_core::trajectory::{render_trajectory, Context, Finding, Polarity, Trajectory, Vocab};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random graph with `n_e` entities and `n_a` attributes. Exclusive entity
/// pairs never share an association, so the result always validates.
fn random_graph(rng: &mut ChaCha8Rng, n_e: usize, n_a: usize) -> ConceptGraph {
    let mut g = ConceptGraph::new();
    let entities: Vec<String> = (0..n_e).map(|i| format!("entity{i}")).collect();
    let attrs: Vec<String> = (0..n_a).map(|i| format!("sign{i}")).collect();
    for e in &entities {
        g.add_entity(e);
    }
    for a in &attrs {
        g.add_attribute(a, Category::ALL[rng.gen_range(0..4)]);
    }
    for e in &entities {
        for a in &attrs {
            let kind = match rng.gen_range(0..10) {
                0..=2 => RelationKind::Association,
                3..=4 => RelationKind::Exclusion,
                _ => continue,
            };
            g.set_relation(e, a, kind);
        }
    }
    for i in 0..n_e {
        for j in i + 1..n_e {
            if rng.gen_bool(0.2) {
                let shared = g
                    .associated_attributes(&entities[i])
                    .unwrap()
                    .into_iter()
                    .any(|a| g.associated_attributes(&entities[j]).unwrap().contains(&a));
                if !shared {
                    g.add_exclusion(&entities[i], &entities[j]);
                }
            }
        }
    }
    assert!(g.validate().is_empty(), "{:?}", g.validate());
    g
}

/// A factual report for `entity`: some of its associations asserted, plus
/// negated mentions of attributes it does not require.
fn random_factual(
    rng: &mut ChaCha8Rng,
    g: &ConceptGraph,
    v: &Vocab,
    entity: &str,
) -> Trajectory {
    let mut findings = Vec::new();
    let mut used = BTreeSet::new();
    for a in g.associated_attributes(entity).unwrap() {
        if rng.gen_bool(0.6) {
            used.insert(a.clone());
            findings.push(Finding::present(a));
        }
    }
    let mut others: Vec<String> = g
        .attributes()
        .map(|a| a.name)
        .filter(|a| !used.contains(a))
        .collect();
    others.shuffle(rng);
    for a in others.into_iter().take(rng.gen_range(0..4)) {
        // irrelevant attributes may be asserted; excluded ones only denied
        let present = g.relation_of(entity, &a).unwrap() == RelationKind::Irrelevance && rng.gen_bool(0.3);
        findings.push(if present { Finding::present(a) } else { Finding::absent(a) });
    }
    findings.shuffle(rng);
    let obs = vec![v.id("obs").unwrap()];
    let ctx = Context::new(obs, vec![v.id("diagnose").unwrap()]);
    render_trajectory(&ctx, &findings, entity, v).unwrap()
}

fn check_world(seed: u64, n_e: usize, n_a: usize, n_records: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, n_e, n_a);
    let v = Vocab::from_graph(&g, ["obs", "diagnose"]).unwrap();
    let p = Perturber::new(&g, &v).unwrap();
    let entities: Vec<String> = g.entities().map(str::to_string).collect();
    let factuals: Vec<Trajectory> = (0..n_records)
        .map(|_| {
            let e = &entities[rng.gen_range(0..entities.len())];
            random_factual(&mut rng, &g, &v, e)
        })
        .collect();
    let pairs = p.generate_all(&factuals, seed).unwrap();
    let expected: usize = factuals.iter().map(|f| p.valid_targets(f).unwrap().len()).sum();
    assert_eq!(pairs.len(), expected);
    for pair in &pairs {
        let cf = &pair.counterfactual;
        assert_eq!(pair.preferred.context, cf.context);
        assert_ne!(pair.preferred.answer, cf.answer);
        assert_eq!(v.word(cf.answer), pair.target_entity);
        for f in p.findings(cf).unwrap() {
            if f.polarity == Polarity::Present {
                assert_ne!(
                    g.relation_of(&pair.target_entity, &f.attribute).unwrap(),
                    RelationKind::Exclusion,
                    "{} asserts `{}`",
                    cf.render(&v),
                    f.attribute
                );
            }
        }
    }
    pairs.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counterfactuals_respect_target_exclusions(seed in any::<u64>(), n_e in 2usize..7, n_a in 3usize..14) {
        check_world(seed, n_e, n_a, 20);
    }
}

#[test]
fn generation_is_deterministic_in_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 5, 10);
    let v = Vocab::from_graph(&g, ["obs", "diagnose"]).unwrap();
    let p = Perturber::new(&g, &v).unwrap();
    let factuals: Vec<_> = (0..30).map(|i| random_factual(&mut rng, &g, &v, &format!("entity{}", i % 5))).collect();
    let a = p.generate_all(&factuals, 11).unwrap();
    let b = p.generate_all(&factuals, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn every_other_entity_is_a_target() {
    // 6 entities: each record has 5 targets
    assert_eq!(check_world(3, 6, 12, 10), 50);
}
