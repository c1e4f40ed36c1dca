//! Acceptance gate. Each criterion prints one PASS/FAIL line with the
//! measured values; the process fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::LN_2;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cpo_core::concept_graph::{Category, ConceptGraph, RelationKind};
use cpo_core::corpus::{generate_regime, WorldSpec, CONFUSABLE};
use cpo_core::counterfactual::Perturber;
use cpo_core::cpo::{cpo_grad, cpo_loss, cpo_loss_batch, implicit_reward_diff, sft_grad, train, CpoConfig, TrainData};
use cpo_core::drift::{build_stream, causal_effect, detect_drift, label_mass, splice_shift, LatentMode};
use cpo_core::eval_metrics::{answer_accuracy, bleu, bleu4, greedy_decode, rouge_l};
use cpo_core::gradcheck::{check, DEFAULT_EPSILON};
use cpo_core::policy::{Decoding, Hyper, PolicyParams};
use cpo_core::trajectory::{
    render_trajectory, Context, Finding, Phrasebook, Polarity, PreferencePair, Token, Trajectory, Vocab,
    DEFAULT_MAX_LEN,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);

/// Name, runtime budget in seconds (`u64::MAX` for none), check.
type Criterion = (&'static str, u64, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 preference-loss anchor", 1, anchor),
        ("2 gradient correctness", 30, gradients),
        ("3 ablation direction", 300, ablation),
        ("4 counterfactual plausibility", 30, plausibility),
        ("5 drift detection ROC", 120, drift_roc),
        ("6 causal effect sanity", 60, causal_sanity),
        ("7 metric oracles", 1, metric_oracles),
        ("8 reproducibility", u64::MAX, reproducibility),
    ];
    let mut failed = 0;
    for (name, budget_s, f) in criteria {
        let t0 = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| (false, format!("panicked: {}", panic_text(&e))));
        let elapsed = t0.elapsed();
        let in_budget = budget_s == u64::MAX || elapsed < Duration::from_secs(budget_s);
        let pass = ok && in_budget;
        if !pass {
            failed += 1;
        }
        let budget = if budget_s == u64::MAX { "none".into() } else { format!("< {budget_s} s") };
        println!(
            "criterion {name}: {} | {detail} | {:.2} s (budget {budget})",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
        );
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

// ---- small random instances -------------------------------------------------

fn small_vocab() -> Vocab {
    Vocab::new(["a", "b", "c"], ["x", "y", "z", "w"]).unwrap()
}

fn small_hyper() -> Hyper {
    Hyper { window: 3, embed_dim: 3, hidden_dim: 4 }
}

fn random_words(v: &Vocab, rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
    let words = ["x", "y", "z", "w"];
    (0..n).map(|_| v.id(words[rng.gen_range(0..words.len())]).unwrap()).collect()
}

fn random_trajectory(v: &Vocab, ctx: &Context, rng: &mut ChaCha8Rng) -> Trajectory {
    let len = rng.gen_range(0..5);
    Trajectory {
        context: ctx.clone(),
        thinking: random_words(v, rng, len),
        answer: v.labels()[rng.gen_range(0..v.labels().len())],
    }
}

fn random_pair(v: &Vocab, rng: &mut ChaCha8Rng) -> PreferencePair {
    let n = rng.gen_range(1..4);
    let ctx = Context::new(random_words(v, rng, n), vec![]);
    let plus = random_trajectory(v, &ctx, rng);
    let mut minus = random_trajectory(v, &ctx, rng);
    while minus.answer == plus.answer {
        minus.answer = v.labels()[rng.gen_range(0..v.labels().len())];
    }
    PreferencePair::new(plus, minus, "a", "b").unwrap()
}

// ---- 1 ----------------------------------------------------------------------

fn anchor() -> Verdict {
    let v = small_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_ln2, mut worst_margin) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let theta = PolicyParams::init_uniform(v.len(), small_hyper(), i, 1.0);
        let reference = PolicyParams::init_uniform(v.len(), small_hyper(), 10_000 + i, 1.0);
        let pair = random_pair(&v, &mut rng);
        let beta = rng.gen_range(0.01..3.0);
        let at_ref = cpo_loss(&theta, &theta, &pair, beta).unwrap();
        worst_ln2 = worst_ln2.max((at_ref.loss - LN_2).abs());
        let r = cpo_loss(&theta, &reference, &pair, beta).unwrap();
        let d = implicit_reward_diff(&theta, &reference, &pair, beta).unwrap();
        worst_margin = worst_margin.max((r.margin - d).abs());
    }
    (
        worst_ln2 < 1e-12 && worst_margin < 1e-12,
        format!("200 pairs, max |loss - ln 2| = {worst_ln2:.1e}, max |margin - reward diff| = {worst_margin:.1e}"),
    )
}

// ---- 2 ----------------------------------------------------------------------

fn gradients() -> Verdict {
    let v = small_vocab();
    let mut worst = 0.0f64;
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + instance);
        let theta = PolicyParams::init_uniform(v.len(), small_hyper(), instance, 0.5);
        let batch: Vec<Trajectory> = (0..rng.gen_range(1..4))
            .map(|_| {
                let n = rng.gen_range(0..3);
                let ctx = Context::new(random_words(&v, &mut rng, n), vec![]);
                random_trajectory(&v, &ctx, &mut rng)
            })
            .collect();
        let (_, analytic) = sft_grad(&theta, &batch).unwrap();
        let r = check(&theta, &analytic, DEFAULT_EPSILON, |p| sft_grad(p, &batch).unwrap().0);
        worst = worst.max(r.max_rel_error);

        let reference = PolicyParams::init_uniform(v.len(), small_hyper(), 1000 + instance, 0.5);
        let pairs: Vec<_> = (0..rng.gen_range(1..4)).map(|_| random_pair(&v, &mut rng)).collect();
        let beta = [0.1, 0.5, 2.0][instance as usize % 3];
        let (_, analytic) = cpo_grad(&theta, &reference, &pairs, beta).unwrap();
        let r = check(&theta, &analytic, DEFAULT_EPSILON, |p| {
            cpo_loss_batch(p, &reference, &pairs, beta).unwrap().loss
        });
        worst = worst.max(r.max_rel_error);
    }
    (worst < 1e-5, format!("20 instances x 2 losses, max relative error {worst:.2e}"))
}

// ---- 3 ----------------------------------------------------------------------

/// Held-out accuracy on the confusable subset after SFT alone and after SFT
/// followed by preference training, for one seed.
fn ablation_seed(spec: &WorldSpec, vocab: &Vocab, seed: u64) -> (f64, f64) {
    let factuals: Vec<_> = generate_regime(spec, 0, 2000, 1000 + seed)
        .unwrap()
        .into_iter()
        .map(|s| s.trajectory)
        .collect();
    let confusable: Vec<_> = generate_regime(spec, 0, 2000, 5000 + seed)
        .unwrap()
        .into_iter()
        .map(|s| s.trajectory)
        .filter(|t| CONFUSABLE.contains(&vocab.word(t.answer)))
        .collect();

    let theta0 = PolicyParams::init(vocab.len(), Hyper::default(), seed);
    let sft_cfg = CpoConfig { steps: 500, seed, ..CpoConfig::sft_default() }.with_even_schedule(&[0]);
    let mut data = BTreeMap::new();
    data.insert(0u32, factuals.clone());
    let (sft, _) = train(&theta0, TrainData::Sft(&data), &sft_cfg).unwrap();

    let pairs = Perturber::new(&spec.graph, vocab).unwrap().generate_all(&factuals, seed).unwrap();
    let mut pair_data = BTreeMap::new();
    pair_data.insert(0u32, pairs);
    let cpo_cfg = CpoConfig { steps: 500, beta: 0.1, seed, ..CpoConfig::default() }.with_even_schedule(&[0]);
    let (tuned, _) = train(&sft, TrainData::Cpo { reference: &sft, pairs: &pair_data }, &cpo_cfg).unwrap();

    let acc = |theta: &PolicyParams| {
        let pred = greedy_decode(theta, &confusable, vocab, DEFAULT_MAX_LEN).unwrap();
        answer_accuracy(&pred, &confusable, vocab).unwrap().0
    };
    (acc(&sft), acc(&tuned))
}

fn ablation() -> Verdict {
    let spec = WorldSpec::demo(1, 0.0).unwrap();
    let vocab = spec.vocab().unwrap();
    let results: Vec<(f64, f64)> = (0..5u64).into_par_iter().map(|s| ablation_seed(&spec, &vocab, s)).collect();
    let gains: Vec<f64> = results.iter().map(|(sft, cpo)| 100.0 * (cpo - sft)).collect();
    let wins = gains.iter().filter(|&&g| g >= 5.0).count();
    let detail = results
        .iter()
        .zip(&gains)
        .map(|((s, c), g)| format!("{s:.3}->{c:.3} ({g:+.1})"))
        .collect::<Vec<_>>()
        .join(", ");
    (wins >= 4, format!("{wins}/5 seeds gain >= 5 points: {detail}"))
}

// ---- 4 ----------------------------------------------------------------------

fn random_graph(rng: &mut ChaCha8Rng, n_e: usize, n_a: usize) -> ConceptGraph {
    let mut g = ConceptGraph::new();
    let entities: Vec<String> = (0..n_e).map(|i| format!("entity{i}")).collect();
    for e in &entities {
        g.add_entity(e);
    }
    for i in 0..n_a {
        g.add_attribute(&format!("sign{i}"), Category::ALL[rng.gen_range(0..4)]);
    }
    for e in &entities {
        for i in 0..n_a {
            let kind = match rng.gen_range(0..10) {
                0..=2 => RelationKind::Association,
                3..=4 => RelationKind::Exclusion,
                _ => continue,
            };
            g.set_relation(e, &format!("sign{i}"), kind);
        }
    }
    for i in 0..n_e {
        for j in i + 1..n_e {
            let a = g.associated_attributes(&entities[i]).unwrap();
            let b = g.associated_attributes(&entities[j]).unwrap();
            if rng.gen_bool(0.2) && !a.iter().any(|x| b.contains(x)) {
                g.add_exclusion(&entities[i], &entities[j]);
            }
        }
    }
    assert!(g.validate().is_empty());
    g
}

fn random_factual(rng: &mut ChaCha8Rng, g: &ConceptGraph, v: &Vocab, entity: &str) -> Trajectory {
    let mut findings = Vec::new();
    let mut used = BTreeSet::new();
    for a in g.associated_attributes(entity).unwrap() {
        if rng.gen_bool(0.6) {
            used.insert(a.clone());
            findings.push(Finding::present(a));
        }
    }
    let mut others: Vec<String> = g.attributes().map(|a| a.name).filter(|a| !used.contains(a)).collect();
    others.shuffle(rng);
    for a in others.into_iter().take(rng.gen_range(0..4)) {
        let present = g.relation_of(entity, &a).unwrap() == RelationKind::Irrelevance && rng.gen_bool(0.3);
        findings.push(if present { Finding::present(a) } else { Finding::absent(a) });
    }
    findings.shuffle(rng);
    let ctx = Context::new(vec![v.id("obs").unwrap()], vec![v.id("diagnose").unwrap()]);
    render_trajectory(&ctx, &findings, entity, v).unwrap()
}

fn plausibility() -> Verdict {
    let (mut total, mut excluded, mut unflipped, mut context_changed) = (0usize, 0usize, 0usize, 0usize);
    let mut graphs = 0;
    let mut seed = 0u64;
    while total < 10_000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_e, n_a) = (rng.gen_range(2..9), rng.gen_range(3..16));
        let g = random_graph(&mut rng, n_e, n_a);
        let v = Vocab::from_graph(&g, ["obs", "diagnose"]).unwrap();
        let p = Perturber::new(&g, &v).unwrap();
        let entities: Vec<String> = g.entities().map(str::to_string).collect();
        let factuals: Vec<_> = (0..50)
            .map(|_| {
                let e = entities[rng.gen_range(0..entities.len())].clone();
                random_factual(&mut rng, &g, &v, &e)
            })
            .collect();
        for pair in p.generate_all(&factuals, seed).unwrap() {
            total += 1;
            let cf = &pair.counterfactual;
            if cf.answer == pair.preferred.answer || v.word(cf.answer) != pair.target_entity {
                unflipped += 1;
            }
            if cf.context != pair.preferred.context {
                context_changed += 1;
            }
            let bad = p.findings(cf).unwrap().iter().any(|f| {
                f.polarity == Polarity::Present
                    && g.relation_of(&pair.target_entity, &f.attribute).unwrap() == RelationKind::Exclusion
            });
            if bad {
                excluded += 1;
            }
        }
        graphs += 1;
        seed += 1;
    }
    (
        excluded == 0 && unflipped == 0 && context_changed == 0,
        format!(
            "{total} pairs on {graphs} graphs: {excluded} assert an excluded attribute, \
             {unflipped} unflipped, {context_changed} with changed context"
        ),
    )
}

// ---- 5 ----------------------------------------------------------------------

fn drift_roc() -> Verdict {
    let spec = WorldSpec::demo(2, 0.3).unwrap();
    let vocab = spec.vocab().unwrap();
    let phrasebook = Phrasebook::new(&spec.graph, &vocab).unwrap();
    let mut data = BTreeMap::new();
    data.insert(
        0u32,
        generate_regime(&spec, 0, 2000, 1).unwrap().into_iter().map(|s| s.trajectory).collect::<Vec<_>>(),
    );
    let cfg = CpoConfig { steps: 500, ..CpoConfig::sft_default() }.with_even_schedule(&[0]);
    let (policy, _) = train(&PolicyParams::init(vocab.len(), Hyper::default(), 0), TrainData::Sft(&data), &cfg).unwrap();

    let contexts = generate_regime(&spec, 0, 100, 9).unwrap();
    let donors: Vec<_> = generate_regime(&spec, 1, 400, 10).unwrap().into_iter().map(|s| s.trajectory).collect();

    // stationary streams are the policy's own greedy chains
    let stationary: Vec<Trajectory> = contexts
        .iter()
        .enumerate()
        .map(|(i, s)| policy.sample(s.context(), &vocab, i as u64, DEFAULT_MAX_LEN, Decoding::Greedy).unwrap())
        .collect();
    // injected streams switch to a chain from the shifted regime mid-way
    let mut next_donor = 0;
    let injected: Vec<Trajectory> = stationary
        .iter()
        .enumerate()
        .map(|(i, base)| loop {
            let donor = &donors[next_donor % donors.len()];
            next_donor += 1;
            if donor.answer == base.answer {
                continue;
            }
            if let Ok(t) = splice_shift(&phrasebook, &vocab, base, donor, i % 3 + 1) {
                break t;
            }
        })
        .collect();

    let flag_rate = |streams: &[Trajectory]| {
        let flagged = streams
            .par_iter()
            .enumerate()
            .filter(|(i, t)| {
                let mode = LatentMode::Rollout { n: 200, seed: *i as u64 };
                detect_drift(&build_stream(&policy, &vocab, t, mode).unwrap(), 0.2).is_flagged()
            })
            .count();
        flagged as f64 / streams.len() as f64
    };
    let tpr = flag_rate(&injected);
    let fpr = flag_rate(&stationary);
    (tpr >= 0.9 && fpr <= 0.05, format!("100 + 100 streams at TV 0.2: TPR {tpr:.2}, FPR {fpr:.2}"))
}

// ---- 6 ----------------------------------------------------------------------

fn causal_sanity() -> Verdict {
    let v = Vocab::new(["a", "b", "c"], ["x", "y"]).unwrap();
    let ctx = Context::new(vec![v.id("x").unwrap()], vec![]);
    let words = [v.id("x").unwrap(), v.id("y").unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut chain = |answer: usize| Trajectory {
        context: ctx.clone(),
        thinking: (0..rng.gen_range(0..6)).map(|_| words[rng.gen_range(0..2)]).collect(),
        answer: v.labels()[answer],
    };

    let mut general = BTreeMap::new();
    general.insert(0, PolicyParams::init_uniform(v.len(), Hyper { window: 4, embed_dim: 3, hidden_dim: 5 }, 9, 1.5));
    let mut blind = BTreeMap::new();
    blind.insert(0, PolicyParams::init_uniform(v.len(), Hyper { window: 1, embed_dim: 3, hidden_dim: 4 }, 5, 2.0));

    let (mut diagonal, mut antisym, mut blind_max) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (t, u) = (chain(0), chain(1));
        for label in v.labels() {
            let f = label_mass(&v, *label);
            let psi = |ck: &BTreeMap<u32, PolicyParams>, a: &Trajectory, b: &Trajectory| {
                causal_effect(ck, 0, &v, a, b, LatentMode::Exact, &f).unwrap()
            };
            diagonal = diagonal.max(psi(&general, &t, &t).abs());
            antisym = antisym.max((psi(&general, &t, &u) + psi(&general, &u, &t)).abs());
            blind_max = blind_max.max(psi(&blind, &t, &u).abs());
        }
    }

    // demo world: pneumonia evidence spliced into a cardiomegaly chain
    let spec = WorldSpec::demo(1, 0.0).unwrap();
    let vocab = spec.vocab().unwrap();
    let mut data = BTreeMap::new();
    data.insert(
        0u32,
        generate_regime(&spec, 0, 2000, 21).unwrap().into_iter().map(|s| s.trajectory).collect::<Vec<_>>(),
    );
    let cfg = CpoConfig { steps: 500, seed: 4, ..CpoConfig::sft_default() }.with_even_schedule(&[0]);
    let (sft, _) = train(&PolicyParams::init(vocab.len(), Hyper::default(), 4), TrainData::Sft(&data), &cfg).unwrap();
    let mut ck = BTreeMap::new();
    ck.insert(0, sft);
    let demo_ctx = Context::new(vec![vocab.id("v0").unwrap()], vec![vocab.id("diagnose").unwrap()]);
    let factual = render_trajectory(
        &demo_ctx,
        &[Finding::present("enlarged cardiac silhouette"), Finding::present("shortness of breath")],
        "cardiomegaly",
        &vocab,
    )
    .unwrap();
    let p = Perturber::new(&spec.graph, &vocab).unwrap();
    let target = label_mass(&vocab, vocab.label_of("pneumonia").unwrap());
    let effects: Vec<f64> = (0..10)
        .map(|seed| {
            let cf = p.generate_pair(&factual, "pneumonia", seed).unwrap().counterfactual;
            causal_effect(&ck, 0, &vocab, &cf, &factual, LatentMode::Exact, &target).unwrap()
        })
        .collect();
    let min_effect = effects.iter().cloned().fold(f64::INFINITY, f64::min);

    (
        diagonal == 0.0 && antisym < 1e-12 && blind_max < 1e-12 && min_effect > 0.0,
        format!(
            "max |psi(t,t)| = {diagonal:.1e}, antisymmetry {antisym:.1e}, blind {blind_max:.1e}, \
             demo min psi on pneumonia = {min_effect:.2e}"
        ),
    )
}

// ---- 7 ----------------------------------------------------------------------

fn metric_oracles() -> Verdict {
    // brevity penalty alone: every candidate unigram matches, 3 vs 5 tokens
    let bleu_oracle = (1.0f64 - 5.0 / 3.0).exp();
    let b1 = bleu(&["the", "cat", "sat"], &["the", "cat", "sat", "on", "mat"], 1).unwrap()[0];
    // LCS of length 3 over 4 tokens on both sides
    let rouge = rouge_l(&["a", "b", "c", "d"], &["a", "c", "b", "d"], 1.0).unwrap();
    let s = ["no", "focal", "consolidation", "pneumonia"];
    let identical = bleu4(&s, &s).unwrap() == [1.0; 4] && rouge_l(&s, &s, 1.0).unwrap() == 1.0
        && rouge_l(&s, &s, 1.2).unwrap() == 1.0;
    (
        (b1 - 0.5134).abs() <= 1e-4 && (b1 - bleu_oracle).abs() < 1e-12 && (rouge - 0.75).abs() <= 1e-9 && identical,
        format!("BLEU-1 {b1:.6} (oracle {bleu_oracle:.6}), ROUGE-L {rouge}, identical -> 1.0: {identical}"),
    )
}

// ---- 8 ----------------------------------------------------------------------

fn run_pipeline(dir: &Path) {
    let steps: [&[&str]; 6] = [
        &["gen-data", "--n", "60", "--regimes", "2", "--shift-tv", "0.2"],
        &["gen-counterfactuals", "--corpus", "samples.jsonl"],
        &["train", "--mode", "sft", "--corpus", "samples.jsonl", "--steps", "20"],
        &["train", "--mode", "cpo", "--ref", "sft.ckpt.json", "--pairs", "pairs.jsonl", "--steps", "10"],
        &["monitor", "--ckpt", "cpo.ckpt.json", "--corpus", "samples.jsonl", "--rollouts", "20"],
        &["eval", "--ckpt", "cpo.ckpt.json", "--corpus", "samples.jsonl"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_cpo"))
            .current_dir(dir)
            .env_remove("CPO_OUT_DIR")
            .args(["--seed", "8"])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

/// Manifest contents with the wall-clock fields removed.
fn manifest_without_times(path: &Path) -> serde_json::Value {
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let obj = m.as_object_mut().unwrap();
    obj.remove("started_unix_ms");
    obj.remove("finished_unix_ms");
    m
}

fn reproducibility() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path());
    run_pipeline(b.path());
    let mut names: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let (pa, pb) = (a.path().join(name), b.path().join(name));
        let same = if name.ends_with(".manifest.json") {
            manifest_without_times(&pa) == manifest_without_times(&pb)
        } else {
            fs::read(&pa).ok() == fs::read(&pb).ok()
        };
        if !same {
            differing.push(name.clone());
        }
    }
    let manifests = names.iter().filter(|n| n.ends_with(".manifest.json")).count();
    (
        differing.is_empty() && manifests == 6,
        format!("{} files from 6 subcommand runs, {manifests} manifests, differing: {differing:?}", names.len()),
    )
}
