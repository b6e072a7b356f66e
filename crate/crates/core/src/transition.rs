//! Latent transition kernel over state distributions, the KL machinery
//! used by the bound, and a categorical distributional Bellman operator.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::simplex::{softmax, StateDistribution, SIMPLEX_TOL};

/// Added floor on predicted probabilities before taking logs.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlMode {
    /// q_j is floored at [`KL_FLOOR`].
    #[default]
    Smoothed,
    /// q_j = 0 where p_j > 0 is an error.
    Strict,
}

/// Row-stochastic K x K kernel parameterized by unconstrained logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    logits: Array2<f64>,
    probs: Array2<f64>,
}

fn row_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let s = softmax(row.as_slice().expect("row-major"));
        row.assign(&Array1::from(s));
    }
    p
}

impl TransitionMatrix {
    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.nrows() != logits.ncols() || logits.nrows() == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "transition logits must be square, got {:?}",
                logits.dim()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numeric("non-finite transition logit".into()));
        }
        let logits = logits.as_standard_layout().to_owned();
        let probs = row_softmax(&logits);
        Ok(TransitionMatrix { logits, probs })
    }

    /// Logits ln(max(P_ij, floor)) for a given row-stochastic matrix.
    pub fn from_probs(probs: &Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|x| *x < 0.0) {
                return Err(CoreError::Numeric(format!("row {i} is not on the simplex")));
            }
        }
        TransitionMatrix::from_logits(probs.mapv(|p| p.max(1e-300).ln().max(-690.0)))
    }

    pub fn uniform(k: usize) -> Self {
        TransitionMatrix::from_logits(Array2::zeros((k, k))).expect("square")
    }

    pub fn k(&self) -> usize {
        self.logits.nrows()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i).to_slice().expect("row-major")
    }

    pub fn set_logits(&mut self, logits: Array2<f64>) -> Result<()> {
        *self = TransitionMatrix::from_logits(logits)?;
        Ok(())
    }
}

/// s' = s^T P.
pub fn predict_next(p: &TransitionMatrix, s: &StateDistribution) -> Result<StateDistribution> {
    if s.len() != p.k() {
        return Err(CoreError::DimensionMismatch {
            context: "predict_next",
            expected: p.k(),
            actual: s.len(),
        });
    }
    let k = p.k();
    let mut out = vec![0.0; k];
    for i in 0..k {
        let w = s[i];
        if w != 0.0 {
            out.iter_mut().zip(p.row(i)).for_each(|(o, x)| *o += w * x);
        }
    }
    let sum: f64 = out.iter().sum();
    debug_assert!(
        (sum - 1.0).abs() < SIMPLEX_TOL,
        "predict_next drifted by {}",
        sum - 1.0
    );
    out.iter_mut().for_each(|x| *x /= sum);
    StateDistribution::new(out)
}

/// KL(p || q) in nats with the given zero-handling; 0 log 0 = 0.
pub fn kl_divergence_with(p: &[f64], q: &[f64], mode: KlMode) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CoreError::DimensionMismatch {
            context: "kl_divergence",
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut kl = 0.0;
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj <= 0.0 {
            continue;
        }
        let qj = match mode {
            KlMode::Smoothed => qj.max(KL_FLOOR),
            KlMode::Strict if qj <= 0.0 => return Err(CoreError::ZeroSupport { index: j }),
            KlMode::Strict => qj,
        };
        kl += pj * (pj.ln() - qj.ln());
    }
    Ok(kl)
}

pub fn kl_divergence(p: &StateDistribution, q: &StateDistribution) -> f64 {
    kl_divergence_with(p.as_slice(), q.as_slice(), KlMode::Smoothed).expect("equal lengths")
}

/// dKL(p || q)/dq_j under the smoothed floor.
pub fn kl_grad_q(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| {
            if pj > 0.0 && qj >= KL_FLOOR {
                -pj / qj
            } else {
                0.0
            }
        })
        .collect()
}

/// Chains dL/dP through the row softmax to dL/dlogits.
pub fn softmax_rows_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut g = Array2::zeros(probs.dim());
    for i in 0..probs.nrows() {
        let dot: f64 = probs.row(i).dot(&grad_probs.row(i));
        for j in 0..probs.ncols() {
            g[[i, j]] = probs[[i, j]] * (grad_probs[[i, j]] - dot);
        }
    }
    g
}

/// Mean KL(s_t || s_{t-1}^T P) over pairs and its gradient w.r.t. logits.
pub fn transition_loss(
    p: &TransitionMatrix,
    pairs: &[(StateDistribution, StateDistribution)],
) -> Result<(f64, Array2<f64>)> {
    if pairs.is_empty() {
        return Err(CoreError::Empty("transition pairs"));
    }
    let k = p.k();
    let mut loss = 0.0;
    let mut gp = Array2::<f64>::zeros((k, k));
    for (prev, next) in pairs {
        let pred = predict_next(p, prev)?;
        if next.len() != k {
            return Err(CoreError::DimensionMismatch {
                context: "transition pair",
                expected: k,
                actual: next.len(),
            });
        }
        loss += kl_divergence(next, &pred);
        let dq = kl_grad_q(next.as_slice(), pred.as_slice());
        for i in 0..k {
            let w = prev[i];
            if w != 0.0 {
                gp.row_mut(i)
                    .iter_mut()
                    .zip(&dq)
                    .for_each(|(g, d)| *g += w * d);
            }
        }
    }
    let n = pairs.len() as f64;
    gp.mapv_inplace(|g| g / n);
    Ok((loss / n, softmax_rows_backward(p.probs(), &gp)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub step_size: f64,
    /// Stop once an epoch improves the loss by less than this.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 500,
            step_size: 1.0,
            tol: 1e-12,
        }
    }
}

/// Full-batch gradient descent on the mean transition KL. A step that would
/// raise the loss is retried at half size, so the returned trace (initial
/// loss first) is nonincreasing.
pub fn fit_transition(
    p: &mut TransitionMatrix,
    pairs: &[(StateDistribution, StateDistribution)],
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    if !(cfg.step_size > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "step size must be > 0, got {}",
            cfg.step_size
        )));
    }
    let (mut loss, mut grad) = transition_loss(p, pairs)?;
    let mut trace = vec![loss];
    let mut step = cfg.step_size;
    for epoch in 0..cfg.epochs {
        let mut accepted = None;
        while step > 1e-12 {
            let cand = TransitionMatrix::from_logits(p.logits() - &(grad.clone() * step))?;
            let (l, g) = transition_loss(&cand, pairs)?;
            if !l.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "transition loss diverged at epoch {epoch}: {l}"
                )));
            }
            if l <= loss {
                accepted = Some((cand, l, g));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, l, g)) = accepted else { break };
        let improvement = loss - l;
        *p = cand;
        loss = l;
        grad = g;
        trace.push(loss);
        if improvement < cfg.tol {
            break;
        }
    }
    Ok(trace)
}

/// Logits of the mean of first-step posteriors, the KL-optimal initial row.
pub fn fit_initial_logits(firsts: &[StateDistribution]) -> Result<Vec<f64>> {
    let first = firsts.first().ok_or(CoreError::Empty("initial states"))?;
    let mut mean = vec![0.0; first.len()];
    for s in firsts {
        mean.iter_mut().zip(s.as_slice()).for_each(|(m, x)| *m += x);
    }
    let n = firsts.len() as f64;
    Ok(mean.iter().map(|m| (m / n).max(KL_FLOOR).ln()).collect())
}

/// Discount factor in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DiscountFactor(f64);

impl DiscountFactor {
    pub fn new(g: f64) -> Result<Self> {
        if (0.0..1.0).contains(&g) {
            Ok(DiscountFactor(g))
        } else {
            Err(CoreError::InvalidConfig(format!(
                "discount must lie in [0, 1), got {g}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Strictly increasing support for categorical return distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnGrid(Vec<f64>);

impl ReturnGrid {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.len() < 2 || atoms.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CoreError::InvalidConfig(
                "return grid must be strictly increasing with >= 2 atoms".into(),
            ));
        }
        Ok(ReturnGrid(atoms))
    }

    /// n evenly spaced atoms on [lo, hi].
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(CoreError::InvalidConfig("need at least two atoms".into()));
        }
        ReturnGrid::new(
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Splits unit mass at `v` between the two neighbouring atoms; values
    /// outside the grid are clamped to the end atoms.
    pub fn project(&self, v: f64, mass: f64, out: &mut [f64]) {
        let a = &self.0;
        let n = a.len();
        if v <= a[0] {
            out[0] += mass;
            return;
        }
        if v >= a[n - 1] {
            out[n - 1] += mass;
            return;
        }
        let hi = a.partition_point(|x| *x <= v).min(n - 1);
        let lo = hi - 1;
        let w = (v - a[lo]) / (a[hi] - a[lo]);
        out[lo] += mass * (1.0 - w);
        out[hi] += mass * w;
    }
}

impl Default for ReturnGrid {
    fn default() -> Self {
        ReturnGrid::linspace(0.0, 1.0, 21).expect("valid grid")
    }
}

/// Categorical return distribution on a [`ReturnGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnDistribution(StateDistribution);

impl ReturnDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Ok(ReturnDistribution(StateDistribution::new(probs)?))
    }

    pub fn point_mass(grid: &ReturnGrid, v: f64) -> Self {
        let mut p = vec![0.0; grid.len()];
        grid.project(v, 1.0, &mut p);
        ReturnDistribution(StateDistribution::new(p).expect("projected unit mass"))
    }

    pub fn probs(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn mean(&self, grid: &ReturnGrid) -> f64 {
        self.probs()
            .iter()
            .zip(grid.atoms())
            .map(|(p, a)| p * a)
            .sum()
    }
}

/// Wasserstein-1 distance between two distributions on the same grid.
pub fn wasserstein1(a: &ReturnDistribution, b: &ReturnDistribution, grid: &ReturnGrid) -> f64 {
    let (mut fa, mut fb, mut w) = (0.0, 0.0, 0.0);
    let atoms = grid.atoms();
    for i in 0..atoms.len() - 1 {
        fa += a.probs()[i];
        fb += b.probs()[i];
        w += (fa - fb).abs() * (atoms[i + 1] - atoms[i]);
    }
    w
}

/// Largest per-state Wasserstein-1 distance between two tables.
pub fn sup_wasserstein1(
    a: &[ReturnDistribution],
    b: &[ReturnDistribution],
    grid: &ReturnGrid,
) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| wasserstein1(x, y, grid))
        .fold(0.0, f64::max)
}

/// (T Z)(s) = law of R(s) + gamma Z(s'), s' ~ kernel[s], projected onto the grid.
pub fn bellman_apply(
    z: &[ReturnDistribution],
    grid: &ReturnGrid,
    rewards: &[f64],
    kernel: &Array2<f64>,
    gamma: DiscountFactor,
) -> Result<Vec<ReturnDistribution>> {
    let n = z.len();
    if rewards.len() != n || kernel.dim() != (n, n) {
        return Err(CoreError::DimensionMismatch {
            context: "bellman_apply",
            expected: n,
            actual: if rewards.len() != n {
                rewards.len()
            } else {
                kernel.nrows()
            },
        });
    }
    if let Some(d) = z.iter().find(|d| d.probs().len() != grid.len()) {
        return Err(CoreError::DimensionMismatch {
            context: "bellman_apply grid",
            expected: grid.len(),
            actual: d.probs().len(),
        });
    }
    let g = gamma.value();
    (0..n)
        .map(|s| {
            let mut out = vec![0.0; grid.len()];
            for (s2, &pt) in kernel.row(s).iter().enumerate() {
                if pt == 0.0 {
                    continue;
                }
                for (&atom, &pz) in grid.atoms().iter().zip(z[s2].probs()) {
                    if pz != 0.0 {
                        grid.project(rewards[s] + g * atom, pt * pz, &mut out);
                    }
                }
            }
            let sum: f64 = out.iter().sum();
            out.iter_mut().for_each(|x| *x /= sum);
            ReturnDistribution::new(out)
        })
        .collect()
}
