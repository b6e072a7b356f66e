use ctrls::env::{
    exact_posterior, forward_backward, read_corpus, sample_hmm_corpus, value_iteration_optimum,
    write_corpus, ChainMdp, EnvConfig, ModChain, Op,
};
use itertools::Itertools;
use ndarray::Array2;
use proptest::prelude::*;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn stochastic(k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(simplex(k), k)
        .prop_map(move |rows| Array2::from_shape_vec((k, k), rows.concat()).unwrap())
}

/// Joint weight of every state path, by enumeration.
fn path_weights(
    init: &[f64],
    kernel: &Array2<f64>,
    loglik: &Array2<f64>,
) -> Vec<(Vec<usize>, f64)> {
    let (t_len, k) = loglik.dim();
    (0..t_len)
        .map(|_| 0..k)
        .multi_cartesian_product()
        .map(|z| {
            let mut w = init[z[0]] * loglik[[0, z[0]]].exp();
            for t in 1..t_len {
                w *= kernel[[z[t - 1], z[t]]] * loglik[[t, z[t]]].exp();
            }
            (z, w)
        })
        .collect()
}

proptest! {
    #[test]
    fn forward_backward_matches_enumeration(
        (init, kernel, loglik) in (2usize..=3, 1usize..=4).prop_flat_map(|(k, t)| (
            simplex(k),
            stochastic(k),
            prop::collection::vec(-6.0f64..0.0, k * t)
                .prop_map(move |v| Array2::from_shape_vec((t, k), v).unwrap()),
        ))
    ) {
        let (t_len, k) = loglik.dim();
        let paths = path_weights(&init, &kernel, &loglik);
        let z: f64 = paths.iter().map(|p| p.1).sum();
        let fb = forward_backward(&init, &kernel, &loglik).unwrap();
        prop_assert!((fb.log_likelihood - z.ln()).abs() < 1e-10);
        for t in 0..t_len {
            for j in 0..k {
                let m: f64 = paths.iter().filter(|p| p.0[t] == j).map(|p| p.1).sum::<f64>() / z;
                prop_assert!((fb.marginals[t][j] - m).abs() < 1e-10);
            }
        }
        for t in 1..t_len {
            for i in 0..k {
                let prev: f64 = paths.iter().filter(|p| p.0[t - 1] == i).map(|p| p.1).sum();
                for j in 0..k {
                    let joint: f64 = paths.iter().filter(|p| p.0[t - 1] == i && p.0[t] == j).map(|p| p.1).sum();
                    prop_assert!((fb.pair_conditionals[t - 1][[i, j]] - joint / prev).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn exact_posterior_matches_enumeration(seed in 0u64..1000) {
        let env = ModChain::new(EnvConfig { horizon: 3, hmm_seed: seed % 7, ..EnvConfig::default() }).unwrap();
        let hmm = &env.hmm;
        let rec = env.sample_record(seed);
        let segs = rec.segments();
        let k = hmm.n_states();
        let mut loglik = Array2::zeros((segs.len(), k));
        for (t, s) in segs.iter().enumerate() {
            for j in 0..k {
                loglik[[t, j]] = s.content().iter().map(|&tok| hmm.emissions[[j, tok as usize]]).product::<f64>().ln();
            }
        }
        let paths = path_weights(&hmm.init, &hmm.kernel, &loglik);
        let z: f64 = paths.iter().map(|p| p.1).sum();
        let post = exact_posterior(hmm, &segs).unwrap();
        for (t, m) in post.iter().enumerate() {
            for j in 0..k {
                let want: f64 = paths.iter().filter(|p| p.0[t] == j).map(|p| p.1).sum::<f64>() / z;
                prop_assert!((m[j] - want).abs() < 1e-10);
            }
        }
    }
}

/// Best success probability over every closed-loop deterministic policy,
/// found by listing each (step, value) -> action table.
fn best_policy_by_enumeration(mdp: &ChainMdp, start: u32, gold: u32) -> f64 {
    let m = mdp.modulus as usize;
    let a = mdp.ops.len();
    let slots = mdp.horizon * m;
    let mut best = 0.0f64;
    for code in 0..a.pow(slots as u32) {
        let table: Vec<usize> = (0..slots).map(|s| code / a.pow(s as u32) % a).collect();
        let mut dist = vec![0.0; m];
        dist[start as usize] = 1.0;
        for t in 0..mdp.horizon {
            let mut next = vec![0.0; m];
            for v in 0..m {
                let chosen = table[t * m + v];
                for (b, op) in mdp.ops.iter().enumerate() {
                    let p =
                        (1.0 - mdp.slip) * f64::from(u8::from(b == chosen)) + mdp.slip / a as f64;
                    next[op.apply(v as u32, mdp.modulus) as usize] += dist[v] * p;
                }
            }
            dist = next;
        }
        best = best.max(dist[gold as usize]);
    }
    best
}

#[test]
fn value_iteration_matches_policy_enumeration() {
    for slip in [0.0, 0.2, 0.7] {
        let mdp = ChainMdp {
            modulus: 3,
            horizon: 3,
            ops: vec![Op::Add(1), Op::Mul(2)],
            slip,
        };
        for start in 0..3 {
            for gold in 0..3 {
                let vi = value_iteration_optimum(&mdp, start, gold, 1.0).unwrap();
                let want = best_policy_by_enumeration(&mdp, start, gold);
                assert!(
                    (vi.optimum - want).abs() < 1e-12,
                    "slip {slip} {start}->{gold}: {} vs {want}",
                    vi.optimum
                );
            }
        }
    }
}

#[test]
fn emission_rows_are_separated() {
    for seed in 0..20 {
        let env = ModChain::new(EnvConfig {
            hmm_seed: seed,
            ..EnvConfig::default()
        })
        .unwrap();
        let e = &env.hmm.emissions;
        for (a, b) in (0..e.nrows()).tuple_combinations() {
            let tv: f64 = 0.5
                * e.row(a)
                    .iter()
                    .zip(e.row(b))
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>();
            assert!(tv >= env.config.min_emission_tv);
        }
    }
}

#[test]
fn sampled_transitions_follow_the_kernel() {
    let env = ModChain::new(EnvConfig::default()).unwrap();
    let hmm = &env.hmm;
    let seqs = sample_hmm_corpus(hmm, 20_000, 4, env.config.segment_lengths(), 11);
    let k = hmm.n_states();
    let mut counts = Array2::<f64>::zeros((k, k));
    for s in &seqs {
        for w in s.labels.windows(2) {
            counts[[w[0], w[1]]] += 1.0;
        }
    }
    for i in 0..k {
        let n: f64 = counts.row(i).sum();
        for j in 0..k {
            let p = hmm.kernel[[i, j]];
            let se = (p * (1.0 - p) / n).sqrt();
            assert!(
                (counts[[i, j]] / n - p).abs() <= 4.0 * se + 1e-12,
                "({i},{j})"
            );
        }
    }
}

#[test]
fn corpus_round_trips_and_is_deterministic() {
    let env = ModChain::new(EnvConfig::default()).unwrap();
    let records = env.generate_corpus(50, 3);
    assert_eq!(records, env.generate_corpus(50, 3));
    assert_eq!(records[..20], env.generate_corpus(20, 3)[..]);
    let mut buf = Vec::new();
    write_corpus(&mut buf, &records).unwrap();
    assert_eq!(read_corpus(&buf[..]).unwrap(), records);
    for r in &records {
        let ops: Vec<Op> = r.hidden_labels.iter().map(|&i| env.config.ops[i]).collect();
        let mut v = r.query.start_value;
        for op in ops {
            v = op.apply(v, r.query.modulus);
        }
        assert_eq!(v, r.answer.value);
    }
}

#[test]
fn malformed_corpus_line_is_rejected() {
    assert!(read_corpus(&b"{\"schema_version\": 1}\n"[..]).is_err());
}
