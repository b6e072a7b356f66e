use ctrls::policy::{
    dirichlet_log_density, dirichlet_score, policy_entropy, policy_entropy_grad, sample_action,
    Branch, DirichletParams, EntropyKind,
};
use ctrls::rng::rng;
use ctrls::StateDistribution;
use proptest::prelude::*;
use rand::Rng as _;

fn concentrations() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.3f64..8.0, 2..=5)
}

fn interior_point(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

/// Beta(2, 4) CDF: P(Bin(5, x) >= 2).
fn beta_2_4_cdf(x: f64) -> f64 {
    let binom = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0];
    (2..=5)
        .map(|j| binom[j] * x.powi(j as i32) * (1.0 - x).powi(5 - j as i32))
        .sum()
}

#[test]
fn first_coordinate_has_the_beta_marginal() {
    let c = DirichletParams::new(vec![2.0, 1.0, 3.0]).unwrap();
    let mut r = rng(17);
    let n = 20_000;
    let mut xs: Vec<f64> = (0..n).map(|_| c.sample(&mut r)[0]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = beta_2_4_cdf(x);
            (f - i as f64 / n as f64)
                .abs()
                .max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value
    assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
}

#[test]
fn density_integrates_to_one() {
    // uniform simplex points from sorted uniforms; the uniform density is 2
    let c = DirichletParams::new(vec![2.0, 1.0, 3.0]).unwrap();
    let mut r = rng(5);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let (u, v): (f64, f64) = (r.random(), r.random());
        let (lo, hi) = if u < v { (u, v) } else { (v, u) };
        let a = StateDistribution::new(vec![lo, hi - lo, 1.0 - hi]).unwrap();
        sum += dirichlet_log_density(&c, &a).unwrap().exp() / 2.0;
    }
    let mean = sum / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "E[p / 2] = {mean}");
}

#[test]
fn sample_mean_matches_concentration_mean() {
    let c = DirichletParams::new(vec![0.5, 2.0, 1.5, 4.0]).unwrap();
    let mut r = rng(23);
    let n = 50_000;
    let mut acc = [0.0; 4];
    for _ in 0..n {
        let a = c.sample(&mut r);
        for j in 0..4 {
            acc[j] += a[j];
        }
    }
    let total = c.total();
    for (j, m) in c.mean().iter().enumerate() {
        let var = m * (1.0 - m) / (total + 1.0);
        assert!((acc[j] / n as f64 - m).abs() < 4.0 * (var / n as f64).sqrt());
    }
}

#[test]
fn exploration_branch_frequency() {
    let c = DirichletParams::new(vec![3.0, 0.2, 1.0]).unwrap();
    for eps in [0.0, 0.1, 0.3, 1.0] {
        let mut r = rng(99);
        let n = 40_000;
        let uniform = (0..n)
            .filter(|_| sample_action(&c, eps, &mut r).unwrap().1 == Branch::Uniform)
            .count() as f64;
        let sd = (eps * (1.0 - eps) / n as f64).sqrt();
        assert!(
            (uniform / n as f64 - eps).abs() <= 3.0 * sd + 1e-12,
            "eps {eps}"
        );
    }
    assert!(sample_action(&c, 1.5, &mut rng(0)).is_err());
}

#[test]
fn tiny_concentrations_stay_on_the_simplex() {
    let c = DirichletParams::new(vec![1e-3, 1e-3, 1e-3]).unwrap();
    let mut r = rng(1);
    for _ in 0..1000 {
        let a = c.sample(&mut r);
        assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(a.as_slice().iter().all(|x| x.is_finite() && *x >= 0.0));
    }
}

proptest! {
    #[test]
    fn score_is_the_density_derivative((c, a) in concentrations().prop_flat_map(|c| { let k = c.len(); (Just(c), interior_point(k)) })) {
        let a = StateDistribution::new(a).unwrap();
        let score = dirichlet_score(&DirichletParams::new(c.clone()).unwrap(), &a).unwrap();
        for j in 0..c.len() {
            let h = 1e-6;
            let at = |d: f64| {
                let mut cc = c.clone();
                cc[j] += d;
                dirichlet_log_density(&DirichletParams::new(cc).unwrap(), &a).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            prop_assert!((fd - score[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn entropy_gradients_match_differences(c in concentrations()) {
        for kind in [EntropyKind::Categorical, EntropyKind::Differential] {
            let g = policy_entropy_grad(&DirichletParams::new(c.clone()).unwrap(), kind);
            for j in 0..c.len() {
                let h = 1e-6;
                let at = |d: f64| {
                    let mut cc = c.clone();
                    cc[j] += d;
                    policy_entropy(&DirichletParams::new(cc).unwrap(), kind)
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} {j}");
            }
        }
    }

    #[test]
    fn categorical_entropy_is_bounded(c in concentrations()) {
        let h = policy_entropy(&DirichletParams::new(c.clone()).unwrap(), EntropyKind::Categorical);
        prop_assert!(h >= 0.0 && h <= (c.len() as f64).ln() + 1e-12);
    }
}
