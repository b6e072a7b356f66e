use crate::abstraction::{latent_vector, Centroids};
use crate::backbone::{
    step_log_likelihood, step_log_likelihood_grad, BackboneParams, ConditionerParams, LatentVector,
    Temperature,
};
use crate::env::{forward_backward, Segment, Smoothing};
use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::rng;
use crate::simplex::{softmax, StateDistribution};
use crate::transition::{
    kl_divergence, kl_divergence_with, kl_grad_q, predict_next, softmax_rows_backward, KlMode,
    TransitionMatrix,
};
use ndarray::Array2;

/// Enumeration limit for [`exact_log_likelihood`].
pub const MAX_PATHS: f64 = 1e6;

/// Per-step reconstruction and KL terms of the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    /// sum(recon) - sum(kl)
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(recon: Vec<f64>, kl: Vec<f64>) -> Self {
        let total = recon.iter().sum::<f64>() - kl.iter().sum::<f64>();
        ElboBreakdown { recon, kl, total }
    }

    pub fn recon_sum(&self) -> f64 {
        self.recon.iter().sum()
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl.iter().sum()
    }
}

/// How latent expectations inside the reconstruction term are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElboMode {
    /// z_t = sum_j s_tj gamma_j; KL against the marginal prediction
    /// s_{t-1}^T P.
    Relaxed,
    /// `samples` hard draws z_t ~ s_t per step; expected KL.
    MonteCarlo { samples: usize, seed: u64 },
    /// Exact expectation over hard z_t ~ s_t; expected KL.
    Exact,
}

impl ElboMode {
    /// M = 0 selects the relaxation, M >= 1 Monte Carlo.
    pub fn from_samples(m: usize, seed: u64) -> ElboMode {
        if m == 0 {
            ElboMode::Relaxed
        } else {
            ElboMode::MonteCarlo { samples: m, seed }
        }
    }
}

/// Everything the bound depends on besides the data and posteriors.
#[derive(Debug, Clone, Copy)]
pub struct LatentModelRef<'a> {
    pub generator: &'a BackboneParams,
    pub conditioner: &'a ConditionerParams,
    pub centroids: &'a Centroids,
    pub transition: &'a TransitionMatrix,
    pub init_logits: &'a [f64],
    pub temperature: Temperature,
}

impl LatentModelRef<'_> {
    pub fn k(&self) -> usize {
        self.transition.k()
    }

    pub fn init_prior(&self) -> StateDistribution {
        StateDistribution::from_logits(self.init_logits)
    }

    fn check(&self, segments: &[Segment], posteriors: &[StateDistribution]) -> Result<()> {
        if segments.is_empty() {
            return Err(CoreError::Empty("segment sequence"));
        }
        if posteriors.len() != segments.len() {
            return Err(CoreError::DimensionMismatch {
                context: "posteriors per step",
                expected: segments.len(),
                actual: posteriors.len(),
            });
        }
        let k = self.k();
        if self.centroids.k() != k || self.init_logits.len() != k {
            return Err(CoreError::DimensionMismatch {
                context: "latent state count",
                expected: k,
                actual: self.centroids.k(),
            });
        }
        if let Some(s) = posteriors.iter().find(|s| s.len() != k) {
            return Err(CoreError::DimensionMismatch {
                context: "posterior",
                expected: k,
                actual: s.len(),
            });
        }
        Ok(())
    }

    fn prefix(prompt: &[u32], segments: &[Segment], t: usize) -> Vec<u32> {
        let mut p = prompt.to_vec();
        for s in &segments[..t] {
            p.extend_from_slice(&s.tokens);
        }
        p
    }

    fn step_ll(&self, prefix: &[u32], z: &LatentVector, seg: &Segment) -> f64 {
        step_log_likelihood(
            self.generator,
            self.conditioner,
            prefix,
            z,
            seg,
            self.temperature,
        )
    }

    /// T x K table of log P(x_t | x_<t, z_t = gamma_j).
    pub fn loglik_table(&self, prompt: &[u32], segments: &[Segment]) -> Array2<f64> {
        let k = self.k();
        let mut table = Array2::zeros((segments.len(), k));
        for (t, seg) in segments.iter().enumerate() {
            let prefix = Self::prefix(prompt, segments, t);
            for j in 0..k {
                let z = LatentVector(self.centroids.row(j).to_vec());
                table[[t, j]] = self.step_ll(&prefix, &z, seg);
            }
        }
        table
    }

    pub fn hard_model(&self, prompt: &[u32], segments: &[Segment]) -> HardLatentModel {
        HardLatentModel {
            init: softmax(self.init_logits),
            kernel: self.transition.probs().clone(),
            loglik: self.loglik_table(prompt, segments),
        }
    }
}

/// Expected KL(s_t || P_i) under i ~ s_{t-1}; the prior row for t = 1.
fn expected_kl(model: &LatentModelRef, posteriors: &[StateDistribution]) -> Result<Vec<f64>> {
    let prior = model.init_prior();
    posteriors
        .iter()
        .enumerate()
        .map(|(t, s)| {
            if t == 0 {
                return kl_divergence_with(s.as_slice(), prior.as_slice(), KlMode::Strict);
            }
            let prev = &posteriors[t - 1];
            let mut kl = 0.0;
            for i in 0..model.k() {
                if prev[i] > 0.0 {
                    kl += prev[i]
                        * kl_divergence_with(
                            s.as_slice(),
                            model.transition.row(i),
                            KlMode::Strict,
                        )?;
                }
            }
            Ok(kl)
        })
        .collect()
}

/// Sequential bound for one sequence given per-step posteriors s_{1:T}.
pub fn compute_elbo(
    model: &LatentModelRef,
    prompt: &[u32],
    segments: &[Segment],
    posteriors: &[StateDistribution],
    mode: ElboMode,
) -> Result<ElboBreakdown> {
    model.check(segments, posteriors)?;
    match mode {
        ElboMode::Relaxed => {
            let mut recon = Vec::with_capacity(segments.len());
            let mut kl = Vec::with_capacity(segments.len());
            let prior = model.init_prior();
            for (t, seg) in segments.iter().enumerate() {
                let z = latent_vector(&posteriors[t], model.centroids);
                recon.push(model.step_ll(&LatentModelRef::prefix(prompt, segments, t), &z, seg));
                let pred = if t == 0 {
                    prior.clone()
                } else {
                    predict_next(model.transition, &posteriors[t - 1])?
                };
                kl.push(kl_divergence(&posteriors[t], &pred));
            }
            Ok(ElboBreakdown::new(recon, kl))
        }
        ElboMode::Exact => {
            let table = model.loglik_table(prompt, segments);
            let recon = (0..segments.len())
                .map(|t| expected_recon(&table, t, &posteriors[t]))
                .collect();
            Ok(ElboBreakdown::new(recon, expected_kl(model, posteriors)?))
        }
        ElboMode::MonteCarlo { samples: 0, .. } => Err(CoreError::InvalidConfig(
            "Monte Carlo mode needs at least one sample".into(),
        )),
        ElboMode::MonteCarlo { samples, seed } => {
            let mut r = rng::rng(seed);
            let mut recon = vec![0.0; segments.len()];
            for _ in 0..samples {
                for (t, seg) in segments.iter().enumerate() {
                    let j = rng::categorical(posteriors[t].as_slice(), &mut r);
                    let z = LatentVector(model.centroids.row(j).to_vec());
                    recon[t] +=
                        model.step_ll(&LatentModelRef::prefix(prompt, segments, t), &z, seg);
                }
            }
            recon.iter_mut().for_each(|x| *x /= samples as f64);
            Ok(ElboBreakdown::new(recon, expected_kl(model, posteriors)?))
        }
    }
}

fn expected_recon(table: &Array2<f64>, t: usize, s: &StateDistribution) -> f64 {
    (0..table.ncols())
        .filter(|&j| s[j] > 0.0)
        .map(|j| s[j] * table[[t, j]])
        .sum()
}

/// Hard-latent chain: initial row, kernel, and per-step emission
/// log-likelihoods `loglik[[t, j]] = log p(x_t | x_<t, z_t = j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HardLatentModel {
    pub init: Vec<f64>,
    pub kernel: Array2<f64>,
    pub loglik: Array2<f64>,
}

impl HardLatentModel {
    pub fn horizon(&self) -> usize {
        self.loglik.nrows()
    }

    pub fn k(&self) -> usize {
        self.init.len()
    }

    pub fn posterior(&self) -> Result<Smoothing> {
        forward_backward(&self.init, &self.kernel, &self.loglik)
    }
}

/// log sum over all K^T latent paths of the joint probability.
pub fn exact_log_likelihood(model: &HardLatentModel) -> Result<f64> {
    let (t_len, k) = model.loglik.dim();
    if t_len == 0 {
        return Err(CoreError::Empty("observation sequence"));
    }
    if (k as f64).powi(t_len as i32) > MAX_PATHS {
        return Err(CoreError::NotEnumerable(format!(
            "{k}^{t_len} latent paths exceed {MAX_PATHS}"
        )));
    }
    let mut terms = Vec::with_capacity(k.pow(t_len as u32));
    let mut path = vec![0usize; t_len];
    loop {
        let mut lp = model.init[path[0]].ln() + model.loglik[[0, path[0]]];
        for t in 1..t_len {
            lp += model.kernel[[path[t - 1], path[t]]].ln() + model.loglik[[t, path[t]]];
        }
        terms.push(lp);
        // odometer increment
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return Ok(crate::simplex::log_sum_exp(&terms));
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// First-order variational posterior over hard latent paths:
/// q(z_1) and rows q(z_t = j | z_{t-1} = i) for t >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovPosterior {
    pub init: StateDistribution,
    pub conditionals: Vec<Array2<f64>>,
}

impl MarkovPosterior {
    /// Independent steps with marginals s_t.
    pub fn factorized(posteriors: &[StateDistribution]) -> Result<Self> {
        let first = posteriors.first().ok_or(CoreError::Empty("posteriors"))?;
        let k = first.len();
        let conditionals = posteriors[1..]
            .iter()
            .map(|s| {
                let row = ndarray::Array1::from(s.as_slice().to_vec());
                let mut m = Array2::zeros((k, k));
                for mut r in m.rows_mut() {
                    r.assign(&row);
                }
                m
            })
            .collect();
        Ok(MarkovPosterior {
            init: first.clone(),
            conditionals,
        })
    }

    pub fn from_smoothing(sm: &Smoothing) -> Self {
        MarkovPosterior {
            init: sm.marginals[0].clone(),
            conditionals: sm.pair_conditionals.clone(),
        }
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.init.as_slice().to_vec()];
        for c in &self.conditionals {
            let prev = out.last().unwrap();
            let next: Vec<f64> = (0..c.ncols())
                .map(|j| (0..c.nrows()).map(|i| prev[i] * c[[i, j]]).sum())
                .collect();
            out.push(next);
        }
        out
    }
}

/// E_q[log p(x, z)] + H(q) assembled per step as reconstruction minus
/// expected KL to the model's transition rows.
pub fn markov_elbo(model: &HardLatentModel, q: &MarkovPosterior) -> Result<ElboBreakdown> {
    let t_len = model.horizon();
    if q.conditionals.len() + 1 != t_len || q.init.len() != model.k() {
        return Err(CoreError::DimensionMismatch {
            context: "markov posterior length",
            expected: t_len,
            actual: q.conditionals.len() + 1,
        });
    }
    let m = q.marginals();
    let mut recon = Vec::with_capacity(t_len);
    let mut kl = Vec::with_capacity(t_len);
    for t in 0..t_len {
        recon.push(
            (0..model.k())
                .filter(|&j| m[t][j] > 0.0)
                .map(|j| m[t][j] * model.loglik[[t, j]])
                .sum(),
        );
        if t == 0 {
            kl.push(kl_divergence_with(
                q.init.as_slice(),
                &model.init,
                KlMode::Strict,
            )?);
        } else {
            let c = &q.conditionals[t - 1];
            let mut acc = 0.0;
            for i in 0..model.k() {
                if m[t - 1][i] > 0.0 {
                    let qi = c.row(i).to_vec();
                    let pi = model.kernel.row(i).to_vec();
                    acc += m[t - 1][i] * kl_divergence_with(&qi, &pi, KlMode::Strict)?;
                }
            }
            kl.push(acc);
        }
    }
    Ok(ElboBreakdown::new(recon, kl))
}

/// Gradient of the relaxed bound.
#[derive(Debug, Clone)]
pub struct ElboGrad {
    pub transition: Array2<f64>,
    pub init_logits: Vec<f64>,
    pub generator: BackboneParams,
    pub conditioner: ConditionerParams,
}

/// Relaxed bound and its gradient w.r.t. the transition logits, the initial
/// prior logits, and the generator and conditioner parameters.
pub fn relaxed_elbo_grad(
    model: &LatentModelRef,
    prompt: &[u32],
    segments: &[Segment],
    posteriors: &[StateDistribution],
) -> Result<(ElboBreakdown, ElboGrad)> {
    model.check(segments, posteriors)?;
    let Temperature::Finite(_) = model.temperature else {
        return Err(CoreError::InvalidConfig(
            "greedy decoding has no gradient".into(),
        ));
    };
    let k = model.k();
    let mut recon = Vec::with_capacity(segments.len());
    let mut kl = Vec::with_capacity(segments.len());
    let mut g_gen = model.generator.zeros_like();
    let mut g_cond = model.conditioner.zeros_like();
    let mut g_p = Array2::<f64>::zeros((k, k));
    let prior = model.init_prior();
    let mut g_init = vec![0.0; k];
    for (t, seg) in segments.iter().enumerate() {
        let z = latent_vector(&posteriors[t], model.centroids);
        let prefix = LatentModelRef::prefix(prompt, segments, t);
        let sg = step_log_likelihood_grad(
            model.generator,
            model.conditioner,
            &prefix,
            &z,
            &seg.tokens,
            model.temperature,
        );
        recon.push(sg.log_likelihood);
        g_gen.add_scaled(&sg.backbone, 1.0);
        g_cond.add_scaled(&sg.conditioner, 1.0);

        let pred = if t == 0 {
            prior.clone()
        } else {
            predict_next(model.transition, &posteriors[t - 1])?
        };
        kl.push(kl_divergence(&posteriors[t], &pred));
        // d(-KL)/dq
        let dq: Vec<f64> = kl_grad_q(posteriors[t].as_slice(), pred.as_slice())
            .iter()
            .map(|g| -g)
            .collect();
        if t == 0 {
            let dot: f64 = dq.iter().zip(prior.as_slice()).map(|(a, b)| a * b).sum();
            for j in 0..k {
                g_init[j] += prior[j] * (dq[j] - dot);
            }
        } else {
            for i in 0..k {
                let w = posteriors[t - 1][i];
                if w != 0.0 {
                    g_p.row_mut(i)
                        .iter_mut()
                        .zip(&dq)
                        .for_each(|(g, d)| *g += w * d);
                }
            }
        }
    }
    let grad = ElboGrad {
        transition: softmax_rows_backward(model.transition.probs(), &g_p),
        init_logits: g_init,
        generator: g_gen,
        conditioner: g_cond,
    };
    Ok((ElboBreakdown::new(recon, kl), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{central_difference, relative_error};
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    struct Fixture {
        generator: BackboneParams,
        conditioner: ConditionerParams,
        centroids: Centroids,
        transition: TransitionMatrix,
        init_logits: Vec<f64>,
    }

    impl Fixture {
        fn new(seed: u64, vocab: usize, k: usize) -> Fixture {
            let (d, latent) = (3, 2);
            let mut r = rng::rng(seed);
            let mut conditioner = ConditionerParams::init(d, 2, latent, seed).unwrap();
            conditioner
                .up_w
                .iter_mut()
                .for_each(|x| *x = r.random_range(-1.0..1.0));
            let cents: Vec<f64> = (0..k * latent).map(|_| r.random_range(-2.0..2.0)).collect();
            let logits: Vec<f64> = (0..k * k).map(|_| r.random_range(-1.5..1.5)).collect();
            Fixture {
                generator: BackboneParams::init(vocab, d, 3, seed + 7).unwrap(),
                conditioner,
                centroids: Centroids::new(Array2::from_shape_vec((k, latent), cents).unwrap())
                    .unwrap(),
                transition: TransitionMatrix::from_logits(
                    Array2::from_shape_vec((k, k), logits).unwrap(),
                )
                .unwrap(),
                init_logits: (0..k).map(|_| r.random_range(-1.0..1.0)).collect(),
            }
        }

        fn model(&self) -> LatentModelRef<'_> {
            LatentModelRef {
                generator: &self.generator,
                conditioner: &self.conditioner,
                centroids: &self.centroids,
                transition: &self.transition,
                init_logits: &self.init_logits,
                temperature: Temperature::Finite(1.0),
            }
        }
    }

    fn segments() -> Vec<Segment> {
        vec![
            Segment::terminated(vec![1, 2], None),
            Segment::terminated(vec![3], None),
        ]
    }

    fn random_posteriors(seed: u64, t: usize, k: usize) -> Vec<StateDistribution> {
        let mut r = rng::rng(seed);
        (0..t)
            .map(|_| {
                StateDistribution::from_weights((0..k).map(|_| r.random::<f64>() + 0.05).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn single_state_bound_is_the_likelihood() {
        let m = HardLatentModel {
            init: vec![1.0],
            kernel: array![[1.0]],
            loglik: array![[-2.5], [-0.5]],
        };
        let q = MarkovPosterior::factorized(&[
            StateDistribution::one_hot(1, 0),
            StateDistribution::one_hot(1, 0),
        ])
        .unwrap();
        let b = markov_elbo(&m, &q).unwrap();
        assert_eq!(b.kl, vec![0.0, 0.0]);
        assert_eq!(b.total, -3.0);
        assert_eq!(exact_log_likelihood(&m).unwrap(), -3.0);
    }

    #[test]
    fn single_step_marginalizes_the_prior() {
        let m = HardLatentModel {
            init: vec![0.25, 0.75],
            kernel: array![[0.5, 0.5], [0.5, 0.5]],
            loglik: array![[-1.0, -2.0]],
        };
        let expect = (0.25 * (-1.0f64).exp() + 0.75 * (-2.0f64).exp()).ln();
        assert!((exact_log_likelihood(&m).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn enumeration_limit() {
        let m = HardLatentModel {
            init: vec![0.5; 2],
            kernel: array![[0.5, 0.5], [0.5, 0.5]],
            loglik: Array2::zeros((21, 2)),
        };
        assert!(matches!(
            exact_log_likelihood(&m),
            Err(CoreError::NotEnumerable(_))
        ));
    }

    #[test]
    fn predicted_posteriors_have_zero_kl() {
        let f = Fixture::new(3, 5, 3);
        let m = f.model();
        let s1 = m.init_prior();
        let s2 = predict_next(&f.transition, &s1).unwrap();
        let b = compute_elbo(&m, &[4], &segments(), &[s1, s2], ElboMode::Relaxed).unwrap();
        assert!(b.kl.iter().all(|k| k.abs() < 1e-15), "{:?}", b.kl);
        assert_eq!(b.total, b.recon_sum() - b.kl_sum());
    }

    #[test]
    fn bound_holds_and_is_tight_at_the_posterior() {
        for seed in 0..20 {
            let f = Fixture::new(seed, 5, 3);
            let m = f.model();
            let post = random_posteriors(seed + 100, 2, 3);
            let hard = m.hard_model(&[4], &segments());
            let exact = exact_log_likelihood(&hard).unwrap();
            let b = compute_elbo(&m, &[4], &segments(), &post, ElboMode::Exact).unwrap();
            assert!(b.total <= exact + 1e-9);
            let sm = hard.posterior().unwrap();
            assert!((sm.log_likelihood - exact).abs() < 1e-10);
            let tight = markov_elbo(&hard, &MarkovPosterior::from_smoothing(&sm)).unwrap();
            assert!(
                (tight.total - exact).abs() < 1e-9,
                "{} vs {}",
                tight.total,
                exact
            );
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_and_near_exact() {
        let f = Fixture::new(9, 5, 3);
        let m = f.model();
        let post = random_posteriors(1, 2, 3);
        let mc = |seed| {
            compute_elbo(
                &m,
                &[4],
                &segments(),
                &post,
                ElboMode::MonteCarlo {
                    samples: 4000,
                    seed,
                },
            )
            .unwrap()
        };
        assert_eq!(mc(5), mc(5));
        let exact = compute_elbo(&m, &[4], &segments(), &post, ElboMode::Exact).unwrap();
        assert!((mc(5).total - exact.total).abs() < 0.05);
        assert_eq!(mc(5).kl, exact.kl);
        assert!(compute_elbo(
            &m,
            &[4],
            &segments(),
            &post,
            ElboMode::MonteCarlo {
                samples: 0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn relaxed_gradients_match_finite_differences() {
        for seed in 0..4 {
            let f = Fixture::new(seed, 5, 3);
            let post = random_posteriors(seed + 50, 2, 3);
            let (_, g) = relaxed_elbo_grad(&f.model(), &[4], &segments(), &post).unwrap();
            let total = |f: &Fixture| {
                compute_elbo(&f.model(), &[4], &segments(), &post, ElboMode::Relaxed)
                    .unwrap()
                    .total
            };

            let x = f.transition.logits().iter().copied().collect::<Vec<_>>();
            let fd = central_difference(&x, 1e-6, |x| {
                let mut f2 = Fixture::new(seed, 5, 3);
                f2.transition = TransitionMatrix::from_logits(
                    Array2::from_shape_vec((3, 3), x.to_vec()).unwrap(),
                )
                .unwrap();
                total(&f2)
            });
            assert!(relative_error(g.transition.as_slice().unwrap(), &fd, 1e-8) < 1e-6);

            let fd = central_difference(&f.init_logits, 1e-6, |x| {
                let mut f2 = Fixture::new(seed, 5, 3);
                f2.init_logits = x.to_vec();
                total(&f2)
            });
            assert!(relative_error(&g.init_logits, &fd, 1e-8) < 1e-6);

            let fd = central_difference(&f.conditioner.to_flat(), 1e-6, |x| {
                let mut f2 = Fixture::new(seed, 5, 3);
                f2.conditioner.set_flat(x);
                total(&f2)
            });
            assert!(relative_error(&g.conditioner.to_flat(), &fd, 1e-8) < 1e-6);
        }
    }
}
