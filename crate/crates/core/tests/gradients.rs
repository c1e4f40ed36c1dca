//! Finite-difference checks of the SFT and preference gradients, and the
//! log-sigmoid anchor identities.

use cpo_core::cpo::{cpo_grad, cpo_loss, cpo_loss_batch, implicit_reward_diff, sft_grad};
use cpo_core::gradcheck::{check, DEFAULT_EPSILON};
use cpo_core::policy::{Hyper, PolicyParams};
use cpo_core::trajectory::{Context, PreferencePair, Token, Trajectory, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn vocab() -> Vocab {
    Vocab::new(["a", "b", "c"], ["x", "y", "z", "w"]).unwrap()
}

fn small_hyper() -> Hyper {
    Hyper {
        window: 3,
        embed_dim: 3,
        hidden_dim: 4,
    }
}

fn random_words(v: &Vocab, rng: &mut ChaCha8Rng, n: usize) -> Vec<Token> {
    let words = ["x", "y", "z", "w"];
    (0..n)
        .map(|_| v.id(words[rng.gen_range(0..words.len())]).unwrap())
        .collect()
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

#[test]
fn sft_gradient_matches_central_differences() {
    let v = vocab();
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + instance);
        let theta = PolicyParams::init_uniform(v.len(), small_hyper(), instance, 0.5);
        let batch: Vec<Trajectory> = (0..rng.gen_range(1..4))
            .map(|_| {
                let n = rng.gen_range(0..3);
                let ctx = Context::new(random_words(&v, &mut rng, n), vec![]);
                random_trajectory(&v, &ctx, &mut rng)
            })
            .collect();
        let (_, analytic) = sft_grad(&theta, &batch).unwrap();
        let report = check(&theta, &analytic, DEFAULT_EPSILON, |p| {
            sft_grad(p, &batch).unwrap().0
        });
        assert!(
            report.passed(TOL),
            "instance {instance}: rel err {} at {} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn preference_gradient_matches_central_differences() {
    let v = vocab();
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + instance);
        let theta = PolicyParams::init_uniform(v.len(), small_hyper(), instance, 0.5);
        let reference = PolicyParams::init_uniform(v.len(), small_hyper(), 1000 + instance, 0.5);
        let beta = [0.1, 0.5, 2.0][instance as usize % 3];
        let batch: Vec<_> = (0..rng.gen_range(1..4)).map(|_| random_pair(&v, &mut rng)).collect();
        let (_, analytic) = cpo_grad(&theta, &reference, &batch, beta).unwrap();
        let report = check(&theta, &analytic, DEFAULT_EPSILON, |p| {
            cpo_loss_batch(p, &reference, &batch, beta).unwrap().loss
        });
        assert!(
            report.passed(TOL),
            "instance {instance}: rel err {} at {} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn loss_at_reference_is_ln2() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let theta = PolicyParams::init_uniform(v.len(), small_hyper(), i, 1.0);
        let pair = random_pair(&v, &mut rng);
        let r = cpo_loss(&theta, &theta, &pair, 0.1).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.margin, 0.0);
    }
}

#[test]
fn margin_equals_implicit_reward_difference() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let theta = PolicyParams::init_uniform(v.len(), small_hyper(), i, 1.0);
        let reference = PolicyParams::init_uniform(v.len(), small_hyper(), 500 + i, 1.0);
        let pair = random_pair(&v, &mut rng);
        let beta = rng.gen_range(0.01..3.0);
        let r = cpo_loss(&theta, &reference, &pair, beta).unwrap();
        let d = implicit_reward_diff(&theta, &reference, &pair, beta).unwrap();
        assert!((r.margin - d).abs() < 1e-12);
        assert!((r.reward_diff - d).abs() < 1e-12);

        // independent route: straight from sequence log-probabilities
        let lp = |p: &PolicyParams, t: &Trajectory| p.sequence_logprob(&t.context.tokens(), &t.raw()).unwrap();
        let by_hand = beta
            * ((lp(&theta, &pair.preferred) - lp(&reference, &pair.preferred))
                - (lp(&theta, &pair.counterfactual) - lp(&reference, &pair.counterfactual)));
        assert!((r.margin - by_hand).abs() < 1e-9 * (1.0 + by_hand.abs()));
        let loss = (1.0 + (-by_hand).exp()).ln();
        assert!((r.loss - loss).abs() < 1e-9 * (1.0 + loss));
    }
}
