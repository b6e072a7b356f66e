use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::modchain::{Segment, Vocab};
use crate::error::{CoreError, Result};
use crate::rng::{self, categorical, Rng};
use crate::simplex::{StateDistribution, SIMPLEX_TOL};

/// Inclusive range of content-token counts per emitted segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLengths {
    pub min: usize,
    pub max: usize,
}

/// Ground-truth latent dynamics. Each step the hidden state moves along
/// `kernel` and emits one segment whose content tokens are drawn i.i.d.
/// from the state's `emissions` row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthHMM {
    pub init: Vec<f64>,
    pub kernel: Array2<f64>,
    pub emissions: Array2<f64>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(CoreError::InvalidConfig(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn dirichlet_row(alpha: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..n).map(|_| g.sample(rng).max(1e-300)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / s).collect()
}

impl GroundTruthHMM {
    pub fn new(init: Vec<f64>, kernel: Array2<f64>, emissions: Array2<f64>) -> Result<Self> {
        let k = init.len();
        if k == 0 {
            return Err(CoreError::Empty("hmm states"));
        }
        if kernel.dim() != (k, k) {
            return Err(CoreError::DimensionMismatch {
                context: "hmm kernel",
                expected: k,
                actual: kernel.nrows(),
            });
        }
        if emissions.nrows() != k {
            return Err(CoreError::DimensionMismatch {
                context: "hmm emissions",
                expected: k,
                actual: emissions.nrows(),
            });
        }
        check_row(&init, "initial distribution")?;
        for (i, row) in kernel.rows().into_iter().enumerate() {
            check_row(&row.to_vec(), &format!("kernel row {i}"))?;
        }
        for (i, row) in emissions.rows().into_iter().enumerate() {
            check_row(&row.to_vec(), &format!("emission row {i}"))?;
        }
        Ok(GroundTruthHMM {
            init,
            kernel,
            emissions,
        })
    }

    /// One state per op. A state puts `purity` of its emission mass on its
    /// own op tokens and the rest on filler; kernel rows put
    /// `successor_bias` on the cyclic successor and spread the rest by a
    /// Dirichlet(1) draw.
    pub fn for_vocab(vocab: &Vocab, purity: f64, successor_bias: f64, seed: u64) -> Result<Self> {
        let k = vocab.n_ops;
        let v = vocab.size;
        let mut rng = rng::rng(seed);
        let filler: Vec<u32> = vocab.filler_tokens().collect();
        let mut emissions = Array2::zeros((k, v));
        for op in 0..k {
            let own: Vec<u32> = vocab.op_tokens(op).collect();
            let shares = dirichlet_row(8.0, own.len(), &mut rng);
            for (t, w) in own.iter().zip(&shares) {
                emissions[[op, *t as usize]] = purity * w;
            }
            let rest = 1.0 - purity;
            if filler.is_empty() {
                let others: Vec<u32> = (0..k)
                    .filter(|&o| o != op)
                    .flat_map(|o| vocab.op_tokens(o))
                    .collect();
                if others.is_empty() {
                    emissions[[op, own[0] as usize]] += rest;
                } else {
                    for t in &others {
                        emissions[[op, *t as usize]] += rest / others.len() as f64;
                    }
                }
            } else {
                for t in &filler {
                    emissions[[op, *t as usize]] = rest / filler.len() as f64;
                }
            }
        }
        let mut kernel = Array2::zeros((k, k));
        for i in 0..k {
            let noise = dirichlet_row(1.0, k, &mut rng);
            for j in 0..k {
                kernel[[i, j]] = (1.0 - successor_bias) * noise[j];
            }
            kernel[[i, (i + 1) % k]] += successor_bias;
        }
        GroundTruthHMM::new(vec![1.0 / k as f64; k], kernel, emissions)
    }

    pub fn n_states(&self) -> usize {
        self.init.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.emissions.ncols()
    }

    /// Smallest total-variation distance between two emission rows.
    pub fn min_emission_tv(&self) -> f64 {
        let k = self.n_states();
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in (a + 1)..k {
                let tv = 0.5
                    * self
                        .emissions
                        .row(a)
                        .iter()
                        .zip(self.emissions.row(b))
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>();
                best = best.min(tv);
            }
        }
        if best.is_infinite() {
            1.0
        } else {
            best
        }
    }

    pub fn sample_states(&self, horizon: usize, rng: &mut Rng) -> Vec<usize> {
        let mut states = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let s = if t == 0 {
                categorical(&self.init, rng)
            } else {
                categorical(self.kernel.row(states[t - 1]).as_slice().unwrap(), rng)
            };
            states.push(s);
        }
        states
    }

    pub fn emit_segment(&self, state: usize, lengths: SegmentLengths, rng: &mut Rng) -> Segment {
        let n = rng.random_range(lengths.min..=lengths.max);
        let row = self.emissions.row(state);
        let row = row.as_slice().unwrap();
        let content = (0..n).map(|_| categorical(row, rng) as u32).collect();
        Segment::terminated(content, Some(state))
    }

    /// log P(segment content | state); -inf when impossible.
    pub fn segment_log_likelihood(&self, state: usize, segment: &Segment) -> f64 {
        segment
            .content()
            .iter()
            .map(|&t| self.emissions[[state, t as usize]].ln())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmSequence {
    pub segments: Vec<Segment>,
    pub labels: Vec<usize>,
}

/// Samples `n_sequences` i.i.d. sequences. Sequence `i` draws from its own
/// stream derived from `seed`, so the corpus is reproducible and any prefix
/// of it is stable under changes to `n_sequences`.
pub fn sample_hmm_corpus(
    hmm: &GroundTruthHMM,
    n_sequences: usize,
    horizon: usize,
    lengths: SegmentLengths,
    seed: u64,
) -> Vec<HmmSequence> {
    (0..n_sequences)
        .map(|i| {
            let mut rng = rng::rng(rng::derive(seed, i as u64));
            let labels = hmm.sample_states(horizon, &mut rng);
            let segments = labels
                .iter()
                .map(|&s| hmm.emit_segment(s, lengths, &mut rng))
                .collect();
            HmmSequence { segments, labels }
        })
        .collect()
}

/// Posterior quantities of a first-order latent chain given per-step
/// emission log-likelihoods.
#[derive(Debug, Clone)]
pub struct Smoothing {
    /// P(z_t | x_{1:T})
    pub marginals: Vec<StateDistribution>,
    /// Entry t - 1 (t >= 1), row i: P(z_t = j | z_{t-1} = i, x_{1:T}).
    pub pair_conditionals: Vec<Array2<f64>>,
    pub log_likelihood: f64,
}

/// Scaled forward-backward. `loglik[[t, j]]` is log p(x_t | z_t = j).
pub fn forward_backward(
    init: &[f64],
    kernel: &Array2<f64>,
    loglik: &Array2<f64>,
) -> Result<Smoothing> {
    let (t_len, k) = loglik.dim();
    if t_len == 0 {
        return Err(CoreError::Empty("observation sequence"));
    }
    if init.len() != k || kernel.dim() != (k, k) {
        return Err(CoreError::DimensionMismatch {
            context: "forward_backward",
            expected: k,
            actual: init.len(),
        });
    }
    // e[t][j] = exp(loglik - max_t)
    let mut shifts = vec![0.0; t_len];
    let mut e = Array2::zeros((t_len, k));
    for t in 0..t_len {
        let m = loglik
            .row(t)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY || m.is_nan() {
            return Err(CoreError::ImpossibleObservation { step: t });
        }
        shifts[t] = m;
        for j in 0..k {
            e[[t, j]] = (loglik[[t, j]] - m).exp();
        }
    }

    let mut alpha = Array2::zeros((t_len, k));
    let mut scale = vec![0.0; t_len];
    for t in 0..t_len {
        for j in 0..k {
            let prior = if t == 0 {
                init[j]
            } else {
                (0..k).map(|i| alpha[[t - 1, i]] * kernel[[i, j]]).sum()
            };
            alpha[[t, j]] = prior * e[[t, j]];
        }
        let c: f64 = alpha.row(t).sum();
        if !(c > 0.0) {
            return Err(CoreError::ImpossibleObservation { step: t });
        }
        scale[t] = c;
        alpha.row_mut(t).mapv_inplace(|x| x / c);
    }

    let mut beta = Array2::ones((t_len, k));
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            beta[[t, i]] = (0..k)
                .map(|j| kernel[[i, j]] * e[[t + 1, j]] * beta[[t + 1, j]])
                .sum::<f64>()
                / scale[t + 1];
        }
    }

    let mut marginals = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let w: Vec<f64> = (0..k).map(|j| alpha[[t, j]] * beta[[t, j]]).collect();
        marginals.push(StateDistribution::from_weights(w)?);
    }

    let mut pair_conditionals = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 1..t_len {
        let mut cond = Array2::zeros((k, k));
        for i in 0..k {
            let row: Vec<f64> = (0..k)
                .map(|j| alpha[[t - 1, i]] * kernel[[i, j]] * e[[t, j]] * beta[[t, j]])
                .collect();
            let s: f64 = row.iter().sum();
            for j in 0..k {
                // unreachable predecessors keep the prior row
                cond[[i, j]] = if s > 0.0 { row[j] / s } else { kernel[[i, j]] };
            }
        }
        pair_conditionals.push(cond);
    }

    let log_likelihood = scale.iter().zip(&shifts).map(|(c, m)| c.ln() + m).sum();
    Ok(Smoothing {
        marginals,
        pair_conditionals,
        log_likelihood,
    })
}

/// Per-step posterior marginals of the hidden op states given segments.
pub fn exact_posterior(
    hmm: &GroundTruthHMM,
    segments: &[Segment],
) -> Result<Vec<StateDistribution>> {
    let k = hmm.n_states();
    let mut loglik = Array2::zeros((segments.len(), k));
    for (t, seg) in segments.iter().enumerate() {
        for &tok in seg.content() {
            if tok as usize >= hmm.vocab_size()
                || hmm.emissions.column(tok as usize).iter().all(|p| *p == 0.0)
            {
                return Err(CoreError::ImpossibleObservation { step: t });
            }
        }
        for j in 0..k {
            loglik[[t, j]] = hmm.segment_log_likelihood(j, seg);
        }
    }
    Ok(forward_backward(&hmm.init, &hmm.kernel, &loglik)?.marginals)
}
