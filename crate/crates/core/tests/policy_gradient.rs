use ctrls::env::{ParsedAnswer, Query, Reward, Segment};
use ctrls::params::ParamSet;
use ctrls::policy::{
    policy_entropy, policy_gradient, sample_action, softplus_inv, Branch, EntropyKind,
    PolicyParams, Step, Trajectory,
};
use ctrls::rng::{derive, rng};
use ctrls::StateDistribution;
use ndarray::{Array1, Array2};

fn one_step(state: &StateDistribution, action: StateDistribution, branch: Branch) -> Trajectory {
    Trajectory {
        query: Query {
            id: 0,
            start_value: 0,
            modulus: 7,
            horizon: 1,
        },
        steps: vec![Step {
            state: state.clone(),
            action,
            segment: Segment::terminated(vec![], None),
            log_prob: 0.0,
            branch,
        }],
        answer: ParsedAnswer::ParseFailure,
        reward: Reward {
            value: 0,
            parse_failure: false,
        },
        truncated: false,
    }
}

fn policy_with_bias(c: &[f64], tau: f64) -> PolicyParams {
    let k = c.len();
    PolicyParams {
        weights: Array2::zeros((k, k)),
        bias: Array1::from(c.iter().map(|&x| softplus_inv(x / tau)).collect::<Vec<_>>()),
        tau,
    }
}

/// P(a_0 > 0.5) for a ~ Dir(c), by Simpson quadrature of the Beta(c_0, sum - c_0) marginal.
fn prob_first_exceeds_half(c: &[f64]) -> f64 {
    let (a, b) = (c[0], c.iter().sum::<f64>() - c[0]);
    let f = |x: f64| x.powf(a - 1.0) * (1.0 - x).powf(b - 1.0);
    let simpson = |lo: f64, hi: f64| {
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    simpson(0.5, 1.0) / simpson(0.0, 1.0)
}

fn sample_batch(
    policy: &PolicyParams,
    state: &StateDistribution,
    n: usize,
    eps: f64,
    seed: u64,
) -> Vec<Trajectory> {
    let c = policy.forward(state).unwrap();
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (a, branch) = sample_action(&c, eps, &mut r).unwrap();
            one_step(state, a, branch)
        })
        .collect()
}

#[test]
fn estimator_is_unbiased_against_quadrature() {
    let policy = policy_with_bias(&[2.0, 1.5, 3.0], 1.0);
    let state = StateDistribution::one_hot(3, 0);
    let n = 100_000;
    let batch = sample_batch(&policy, &state, n, 0.0, 7);
    let rewards: Vec<f64> = batch
        .iter()
        .map(|t| f64::from(u8::from(t.steps[0].action[0] > 0.5)))
        .collect();
    // per-sample gradients give the standard error
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for (t, &r) in batch.iter().zip(&rewards) {
        let g = policy_gradient(
            &policy,
            std::slice::from_ref(t),
            &[r],
            0.0,
            EntropyKind::Categorical,
            false,
        )
        .unwrap();
        for j in 0..3 {
            let x = g.grad.weights[[j, 0]];
            sum[j] += x;
            sq[j] += x * x;
        }
    }
    let full = policy_gradient(
        &policy,
        &batch,
        &rewards,
        0.0,
        EntropyKind::Categorical,
        false,
    )
    .unwrap();
    for j in 0..3 {
        let mean = sum[j] / n as f64;
        assert!((full.grad.weights[[j, 0]] - mean).abs() < 1e-12);
        let se = ((sq[j] / n as f64 - mean * mean) / n as f64).sqrt();
        let h = 1e-4;
        let at = |d: f64| {
            let mut p = policy.clone();
            p.weights[[j, 0]] += d;
            prob_first_exceeds_half(p.forward(&state).unwrap().as_slice())
        };
        let exact = (at(h) - at(-h)) / (2.0 * h);
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "component {j}: {mean} vs {exact} (se {se})"
        );
        for i in 1..3 {
            assert_eq!(full.grad.weights[[j, i]], 0.0);
        }
    }
}

#[test]
fn bandit_reward_improves() {
    let mut policy = policy_with_bias(&[1.0, 1.0, 1.0], 1.0);
    let state = StateDistribution::one_hot(3, 0);
    let mut avg = Vec::new();
    for u in 0..200 {
        let batch = sample_batch(&policy, &state, 32, 0.0, derive(3, u));
        let rewards: Vec<f64> = batch
            .iter()
            .map(|t| f64::from(u8::from(t.steps[0].action[1] > 0.8)))
            .collect();
        avg.push(rewards.iter().sum::<f64>() / 32.0);
        let g = policy_gradient(
            &policy,
            &batch,
            &rewards,
            0.0,
            EntropyKind::Categorical,
            true,
        )
        .unwrap();
        policy.add_scaled(&g.grad, 0.5);
    }
    let moving = |i: usize| avg[i..i + 5].iter().sum::<f64>() / 5.0;
    assert!(
        moving(195) > moving(0) + 0.3,
        "{} -> {}",
        moving(0),
        moving(195)
    );
    let c = policy.forward(&state).unwrap();
    assert_eq!(c.mean().iter().cloned().fold(0.0, f64::max), c.mean()[1]);
}

fn entropy_after(alpha: f64, updates: usize, seed: u64) -> Vec<f64> {
    let mut policy = policy_with_bias(&[3.0, 0.5, 0.8], 1.0);
    let state = StateDistribution::one_hot(3, 0);
    let mut trace = vec![policy_entropy(
        &policy.forward(&state).unwrap(),
        EntropyKind::Categorical,
    )];
    for u in 0..updates {
        let batch = sample_batch(&policy, &state, 16, 0.1, derive(seed, u as u64));
        let g = policy_gradient(
            &policy,
            &batch,
            &[0.0; 16],
            alpha,
            EntropyKind::Categorical,
            true,
        )
        .unwrap();
        policy.add_scaled(&g.grad, 0.5);
        trace.push(policy_entropy(
            &policy.forward(&state).unwrap(),
            EntropyKind::Categorical,
        ));
    }
    trace
}

#[test]
fn entropy_bonus_raises_entropy_without_reward() {
    let trace = entropy_after(0.1, 50, 1);
    assert!(trace.windows(2).all(|w| w[1] > w[0]), "{trace:?}");
}

#[test]
fn larger_bonus_gives_more_entropy() {
    for seed in 0..5 {
        let h: Vec<f64> = [0.0, 0.05, 0.1, 0.2]
            .iter()
            .map(|&a| *entropy_after(a, 20, seed).last().unwrap())
            .collect();
        assert!(h.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {h:?}");
    }
}

#[test]
fn no_reward_and_no_bonus_is_a_no_op() {
    let policy = policy_with_bias(&[2.0, 0.7, 1.1], 2.0);
    let state = StateDistribution::from_weights(vec![0.2, 0.5, 0.3]).unwrap();
    let batch = sample_batch(&policy, &state, 16, 0.3, 4);
    let g = policy_gradient(
        &policy,
        &batch,
        &[0.0; 16],
        0.0,
        EntropyKind::Categorical,
        false,
    )
    .unwrap();
    assert_eq!(g.grad_norm, 0.0);
    let mut stepped = policy.clone();
    stepped.add_scaled(&g.grad, 10.0);
    assert_eq!(stepped, policy);
}

#[test]
fn uniform_branch_steps_carry_no_score() {
    let policy = policy_with_bias(&[2.0, 0.7, 1.1], 1.0);
    let state = StateDistribution::one_hot(3, 1);
    let batch = sample_batch(&policy, &state, 64, 1.0, 8);
    assert!(batch.iter().all(|t| t.steps[0].branch == Branch::Uniform));
    let g = policy_gradient(
        &policy,
        &batch,
        &[1.0; 64],
        0.0,
        EntropyKind::Categorical,
        false,
    )
    .unwrap();
    assert_eq!(g.grad_norm, 0.0);
}

#[test]
fn empty_batch_is_rejected() {
    let policy = policy_with_bias(&[1.0, 1.0], 1.0);
    assert!(policy_gradient(&policy, &[], &[], 0.0, EntropyKind::Categorical, false).is_err());
}
