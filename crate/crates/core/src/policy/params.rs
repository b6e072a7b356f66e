use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dirichlet::{DirichletParams, CONCENTRATION_FLOOR};
use crate::error::{CoreError, Result};
use crate::impl_param_set;
use crate::rng::Rng;
use crate::simplex::{StateDistribution, SIMPLEX_TOL};
use crate::transition::TransitionMatrix;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Affine map from a state distribution to concentration logits;
/// c = max(tau * softplus(W s + b), floor). Only `weights` train: on the
/// simplex W s + b = (W + b 1^T) s, so `b` adds no expressiveness, and
/// training it would tie every state's update together.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub tau: f64,
}

impl_param_set!(PolicyParams; weights);

/// Which mixture component produced an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Policy,
    Uniform,
}

impl PolicyParams {
    pub fn zeros(k: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "tau_c must be > 0, got {tau}"
            )));
        }
        Ok(PolicyParams {
            weights: Array2::zeros((k, k)),
            bias: Array1::zeros(k),
            tau,
        })
    }

    /// At each vertex e_i the Dirichlet mean equals row i of `p`, with total
    /// concentration `concentration`.
    pub fn from_transition(p: &TransitionMatrix, tau: f64, concentration: f64) -> Result<Self> {
        if !(concentration > 0.0) || !concentration.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "initial concentration must be > 0, got {concentration}"
            )));
        }
        let k = p.k();
        let mut params = PolicyParams::zeros(k, tau)?;
        for i in 0..k {
            for j in 0..k {
                params.weights[[j, i]] =
                    softplus_inv((concentration * p.row(i)[j] / tau).max(1e-12));
            }
        }
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, s: &StateDistribution) -> Array1<f64> {
        self.weights.dot(&Array1::from(s.as_slice().to_vec())) + &self.bias
    }

    pub fn forward(&self, s: &StateDistribution) -> Result<DirichletParams> {
        if s.len() != self.k() {
            return Err(CoreError::DimensionMismatch {
                context: "policy input",
                expected: self.k(),
                actual: s.len(),
            });
        }
        DirichletParams::new(
            self.logits(s)
                .iter()
                .map(|&l| (self.tau * softplus(l)).max(CONCENTRATION_FLOOR))
                .collect(),
        )
    }

    /// Pulls dL/dc back to dL/dW, accumulating with `weight`.
    pub fn backward(
        &self,
        s: &StateDistribution,
        grad_c: &[f64],
        weight: f64,
        out: &mut PolicyParams,
    ) {
        let logits = self.logits(s);
        for j in 0..self.k() {
            if self.tau * softplus(logits[j]) <= CONCENTRATION_FLOOR {
                continue;
            }
            let g = weight * grad_c[j] * self.tau * logistic(logits[j]);
            for i in 0..self.k() {
                out.weights[[j, i]] += g * s[i];
            }
        }
    }

    /// Kernel whose row i is the Dirichlet mean at vertex e_i.
    pub fn export_transition(&self) -> Result<TransitionMatrix> {
        let k = self.k();
        let mut logits = Array2::zeros((k, k));
        for i in 0..k {
            let m = self.forward(&StateDistribution::one_hot(k, i))?.mean();
            for j in 0..k {
                logits[[i, j]] = m[j].ln();
            }
        }
        TransitionMatrix::from_logits(logits)
    }
}

/// With probability `epsilon` a Dirichlet(1, ..., 1) draw, else a draw from `c`.
pub fn sample_action(
    c: &DirichletParams,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<(StateDistribution, Branch)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CoreError::InvalidConfig(format!(
            "epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    let explore = rng.random::<f64>() < epsilon;
    let a = if explore {
        DirichletParams::uniform(c.k()).sample(rng)
    } else {
        c.sample(rng)
    };
    debug_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
    Ok((
        a,
        if explore {
            Branch::Uniform
        } else {
            Branch::Policy
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn zero_weights_give_uniform_concentration() {
        let p = PolicyParams::zeros(3, 2.0).unwrap();
        let c = p.forward(&StateDistribution::one_hot(3, 1)).unwrap();
        assert!(c
            .as_slice()
            .iter()
            .all(|x| (x - 2.0 * 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn hand_weights() {
        let p = PolicyParams {
            weights: array![[1.0, 0.0], [-1.0, 2.0]],
            bias: array![0.0, 0.5],
            tau: 1.0,
        };
        let c = p.forward(&StateDistribution::one_hot(2, 0)).unwrap();
        assert!((c.as_slice()[0] - 1.3132616875182228).abs() < 1e-12);
        assert!((c.as_slice()[1] - 0.47407698418010663).abs() < 1e-12);
    }

    #[test]
    fn vertex_means_follow_the_kernel() {
        let t = TransitionMatrix::from_probs(&array![
            [0.7, 0.2, 0.1],
            [0.1, 0.1, 0.8],
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        ])
        .unwrap();
        let p = PolicyParams::from_transition(&t, 1.5, 4.5).unwrap();
        for i in 0..3 {
            let c = p.forward(&StateDistribution::one_hot(3, i)).unwrap();
            assert!((c.total() - 4.5).abs() < 1e-9);
            for (m, r) in c.mean().iter().zip(t.row(i)) {
                assert!((m - r).abs() < 1e-9);
            }
        }
        let back = p.export_transition().unwrap();
        assert!((back.probs() - t.probs()).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn branch_extremes() {
        let c = DirichletParams::new(vec![2.0, 3.0]).unwrap();
        let mut r = rng::rng(0);
        for _ in 0..200 {
            assert_eq!(sample_action(&c, 0.0, &mut r).unwrap().1, Branch::Policy);
            assert_eq!(sample_action(&c, 1.0, &mut r).unwrap().1, Branch::Uniform);
        }
        assert!(sample_action(&c, 1.5, &mut r).is_err());
    }
}
