use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::simplex::{log_sum_exp, StateDistribution, SIMPLEX_TOL};
use crate::special::{digamma, ln_gamma, trigamma};

/// Lower bound on every concentration.
pub const CONCENTRATION_FLOOR: f64 = 1e-4;
/// Sampled log-coordinates are kept within this range of the largest, so
/// every coordinate stays strictly positive.
const MAX_LOG_SPREAD: f64 = 700.0;

/// Concentration vector of a Dirichlet over the latent simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirichletParams(Vec<f64>);

impl DirichletParams {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.len() < 2 {
            return Err(CoreError::InvalidConfig(
                "Dirichlet needs at least two coordinates".into(),
            ));
        }
        if let Some((i, v)) = c
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
        {
            return Err(CoreError::Numeric(format!("concentration {i} is {v}")));
        }
        Ok(DirichletParams(c))
    }

    pub fn uniform(k: usize) -> Self {
        DirichletParams(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// c / sum(c)
    pub fn mean(&self) -> Vec<f64> {
        let t = self.total();
        self.0.iter().map(|c| c / t).collect()
    }

    /// Draws through log-Gamma variates; for c < 1 uses
    /// G(c) = G(c + 1) U^(1/c) to avoid underflow.
    pub fn sample(&self, rng: &mut Rng) -> StateDistribution {
        let logs: Vec<f64> = self
            .0
            .iter()
            .map(|&c| {
                let shape = if c < 1.0 { c + 1.0 } else { c };
                let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
                let mut lg = g.max(f64::MIN_POSITIVE).ln();
                if c < 1.0 {
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    lg += u.ln() / c;
                }
                lg
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let clipped: Vec<f64> = logs.iter().map(|l| l.max(top - MAX_LOG_SPREAD)).collect();
        let lse = log_sum_exp(&clipped);
        StateDistribution::from_weights(clipped.iter().map(|l| (l - lse).exp()).collect())
            .expect("positive weights")
    }
}

fn check_interior(a: &StateDistribution, k: usize) -> Result<()> {
    if a.len() != k {
        return Err(CoreError::DimensionMismatch {
            context: "dirichlet point",
            expected: k,
            actual: a.len(),
        });
    }
    if let Some((i, &v)) = a.as_slice().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(CoreError::BoundaryPoint { index: i, value: v });
    }
    let s: f64 = a.as_slice().iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(CoreError::Numeric(format!("dirichlet point sums to {s}")));
    }
    Ok(())
}

/// log Gamma(C) - sum log Gamma(c_j) + sum (c_j - 1) log a_j.
pub fn dirichlet_log_density(c: &DirichletParams, a: &StateDistribution) -> Result<f64> {
    check_interior(a, c.k())?;
    let total = c.total();
    let mut lp = ln_gamma(total);
    for (&cj, &aj) in c.as_slice().iter().zip(a.as_slice()) {
        lp += (cj - 1.0) * aj.ln() - ln_gamma(cj);
    }
    Ok(lp)
}

/// d log p(a) / d c_j = psi(C) - psi(c_j) + log a_j.
pub fn dirichlet_score(c: &DirichletParams, a: &StateDistribution) -> Result<Vec<f64>> {
    check_interior(a, c.k())?;
    let psi_total = digamma(c.total());
    Ok(c.as_slice()
        .iter()
        .zip(a.as_slice())
        .map(|(&cj, &aj)| psi_total - digamma(cj) + aj.ln())
        .collect())
}

/// Which entropy the exploration bonus uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyKind {
    /// Shannon entropy of the mean categorical c / sum(c).
    #[default]
    Categorical,
    /// Differential entropy of the Dirichlet itself.
    Differential,
}

pub fn policy_entropy(c: &DirichletParams, kind: EntropyKind) -> f64 {
    match kind {
        EntropyKind::Categorical => crate::simplex::entropy(&c.mean()),
        EntropyKind::Differential => {
            let total = c.total();
            let k = c.k() as f64;
            let ln_b: f64 =
                c.as_slice().iter().map(|&x| ln_gamma(x)).sum::<f64>() - ln_gamma(total);
            ln_b + (total - k) * digamma(total)
                - c.as_slice()
                    .iter()
                    .map(|&x| (x - 1.0) * digamma(x))
                    .sum::<f64>()
        }
    }
}

/// Gradient of [`policy_entropy`] with respect to the concentrations.
pub fn policy_entropy_grad(c: &DirichletParams, kind: EntropyKind) -> Vec<f64> {
    let total = c.total();
    match kind {
        EntropyKind::Categorical => {
            let m = c.mean();
            let h = crate::simplex::entropy(&m);
            m.iter()
                .map(|&mj| {
                    if mj > 0.0 {
                        (-mj.ln() - h) / total
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        EntropyKind::Differential => {
            let k = c.k() as f64;
            let common = (total - k) * trigamma(total);
            c.as_slice()
                .iter()
                .map(|&x| common - (x - 1.0) * trigamma(x))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{central_difference, relative_error};
    use crate::rng;

    fn sd(v: &[f64]) -> StateDistribution {
        StateDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn density_closed_forms() {
        let c = DirichletParams::new(vec![1.0, 1.0]).unwrap();
        assert!(dirichlet_log_density(&c, &sd(&[0.3, 0.7])).unwrap().abs() < 1e-12);
        let c = DirichletParams::new(vec![2.0, 2.0]).unwrap();
        assert!((dirichlet_log_density(&c, &sd(&[0.5, 0.5])).unwrap() - 1.5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            dirichlet_log_density(&c, &sd(&[1.0, 0.0])),
            Err(CoreError::BoundaryPoint { index: 1, .. })
        ));
    }

    #[test]
    fn entropy_cases() {
        let c = DirichletParams::new(vec![9.0, 1.0]).unwrap();
        assert!((policy_entropy(&c, EntropyKind::Categorical) - 0.3250829733914482).abs() < 1e-12);
        let c = DirichletParams::new(vec![3.0; 4]).unwrap();
        assert!((policy_entropy(&c, EntropyKind::Categorical) - 4f64.ln()).abs() < 1e-12);
        let c = DirichletParams::new(vec![999.0, 0.5, 0.5]).unwrap();
        assert!(policy_entropy(&c, EntropyKind::Categorical) <= 0.01);
        // uniform Dirichlet on the 2-simplex has density 2, entropy -ln 2
        let c = DirichletParams::uniform(3);
        assert!((policy_entropy(&c, EntropyKind::Differential) + 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn score_and_entropy_gradients_match_finite_differences() {
        let c0 = vec![0.7, 2.5, 4.0];
        let a = sd(&[0.2, 0.5, 0.3]);
        let c = DirichletParams::new(c0.clone()).unwrap();
        let fd = central_difference(&c0, 1e-6, |x| {
            dirichlet_log_density(&DirichletParams::new(x.to_vec()).unwrap(), &a).unwrap()
        });
        assert!(relative_error(&dirichlet_score(&c, &a).unwrap(), &fd, 1e-10) < 1e-7);
        for kind in [EntropyKind::Categorical, EntropyKind::Differential] {
            let fd = central_difference(&c0, 1e-6, |x| {
                policy_entropy(&DirichletParams::new(x.to_vec()).unwrap(), kind)
            });
            assert!(relative_error(&policy_entropy_grad(&c, kind), &fd, 1e-10) < 1e-7);
        }
    }

    #[test]
    fn samples_are_interior_even_for_tiny_concentrations() {
        let mut r = rng::rng(3);
        let c = DirichletParams::new(vec![CONCENTRATION_FLOOR, CONCENTRATION_FLOOR, 5.0]).unwrap();
        for _ in 0..1000 {
            let a = c.sample(&mut r);
            assert!(a.as_slice().iter().all(|x| *x > 0.0));
            assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(dirichlet_log_density(&c, &a).unwrap().is_finite());
        }
    }

    #[test]
    fn sample_mean_matches() {
        let mut r = rng::rng(9);
        let c = DirichletParams::new(vec![1.0, 2.0, 5.0]).unwrap();
        let n = 20000;
        let mut m = [0.0; 3];
        for _ in 0..n {
            let a = c.sample(&mut r);
            (0..3).for_each(|j| m[j] += a[j] / n as f64);
        }
        for (got, want) in m.iter().zip(c.mean()) {
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
    }
}
