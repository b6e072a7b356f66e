use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Segment, TERMINATOR};
use crate::error::{CoreError, Result};
use crate::impl_param_set;
use crate::rng::{self, categorical};
use crate::simplex::{argmax, softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub window: usize,
    /// V x d
    pub embed: Array2<f64>,
    /// one weight per window offset, most recent token first
    pub pos_weights: Array1<f64>,
    /// d x d
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    /// V x d
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl_param_set!(BackboneParams; embed, pos_weights, hidden_w, hidden_b, out_w, out_b);

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut rng::Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl BackboneParams {
    pub fn init(vocab: usize, dim: usize, window: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || dim == 0 || window == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "backbone needs vocab >= 2, dim >= 1, window >= 1 (got {vocab}, {dim}, {window})"
            )));
        }
        let mut rng = rng::rng(seed);
        let pos_weights = Array1::from_shape_fn(window, |p| 1.0 / (1.0 + p as f64));
        Ok(BackboneParams {
            window,
            embed: gaussian(vocab, dim, 1.0, &mut rng),
            pos_weights,
            hidden_w: gaussian(dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng),
            hidden_b: Array1::zeros(dim),
            out_w: gaussian(vocab, dim, 0.1, &mut rng),
            out_b: Array1::zeros(vocab),
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embed.ncols()
    }

    /// Position-weighted sum of the embeddings of the last `window` tokens.
    pub(crate) fn context(&self, stream: &[u32]) -> Array1<f64> {
        let mut ctx = Array1::zeros(self.dim());
        for (p, &tok) in stream.iter().rev().take(self.window).enumerate() {
            ctx.scaled_add(self.pos_weights[p], &self.embed.row(tok as usize));
        }
        ctx
    }

    /// Pre-logit representation after reading `stream` (non-empty).
    pub fn hidden(&self, stream: &[u32]) -> Array1<f64> {
        let u = self.hidden_w.dot(&self.context(stream)) + &self.hidden_b;
        u.mapv(sigmoid)
    }

    /// Hidden representations at every position `from..stream.len()`.
    pub fn hidden_rows(&self, stream: &[u32], from: usize) -> TokenEmbeddingMatrix {
        let d = self.dim();
        let n = stream.len() - from;
        let mut rows = Array2::zeros((n, d));
        for i in 0..n {
            rows.row_mut(i)
                .assign(&self.hidden(&stream[..from + i + 1]));
        }
        TokenEmbeddingMatrix(rows)
    }

    pub fn logits(&self, h: &Array1<f64>) -> Array1<f64> {
        self.out_w.dot(h) + &self.out_b
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Residual bottleneck adapter: h' = h + Up([Down h; z]).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionerParams {
    /// r x d
    pub down_w: Array2<f64>,
    pub down_b: Array1<f64>,
    /// d x (r + d')
    pub up_w: Array2<f64>,
    pub up_b: Array1<f64>,
}

impl_param_set!(ConditionerParams; down_w, down_b, up_w, up_b);

impl ConditionerParams {
    /// Random down-projection, zero up-projection: the adapter starts as
    /// the identity map.
    pub fn init(dim: usize, rank: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if rank == 0 || dim == 0 {
            return Err(CoreError::InvalidConfig(
                "conditioner needs rank >= 1 and dim >= 1".into(),
            ));
        }
        let mut rng = rng::rng(seed);
        Ok(ConditionerParams {
            down_w: gaussian(rank, dim, 1.0 / (dim as f64).sqrt(), &mut rng),
            down_b: Array1::zeros(rank),
            up_w: Array2::zeros((dim, rank + latent_dim)),
            up_b: Array1::zeros(dim),
        })
    }

    pub fn rank(&self) -> usize {
        self.down_w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.down_w.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.up_w.ncols() - self.rank()
    }

    /// Bottleneck input [Down h; z].
    pub(crate) fn bottleneck(&self, h: &Array1<f64>, z: &[f64]) -> Array1<f64> {
        let r = self.rank();
        let mut cat = Array1::zeros(r + z.len());
        cat.slice_mut(s![..r])
            .assign(&(self.down_w.dot(h) + &self.down_b));
        cat.slice_mut(s![r..]).assign(&ndarray::ArrayView1::from(z));
        cat
    }

    pub fn apply(&self, h: &Array1<f64>, z: &LatentVector) -> Array1<f64> {
        let cat = self.bottleneck(h, &z.0);
        h + &self.up_w.dot(&cat) + &self.up_b
    }
}

/// Token representations of one segment, n_t x d.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix(pub Array2<f64>);

impl TokenEmbeddingMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(CoreError::Empty("token embedding matrix"));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numeric("non-finite token embedding".into()));
        }
        Ok(TokenEmbeddingMatrix(rows))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// z = sum_j s_j gamma_j, the vector injected into the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Applies the adapter to every row of `e`.
pub fn condition(
    e: &TokenEmbeddingMatrix,
    z: &LatentVector,
    omega: &ConditionerParams,
) -> Result<TokenEmbeddingMatrix> {
    if e.dim() != omega.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "condition: embedding width",
            expected: omega.dim(),
            actual: e.dim(),
        });
    }
    if z.dim() != omega.latent_dim() {
        return Err(CoreError::DimensionMismatch {
            context: "condition: latent dimension",
            expected: omega.latent_dim(),
            actual: z.dim(),
        });
    }
    let mut out = e.0.clone();
    for (i, row) in e.0.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&omega.apply(&row.to_owned(), z));
    }
    Ok(TokenEmbeddingMatrix(out))
}

/// Sampling temperature; `Greedy` is the eta -> 0 limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Greedy,
    Finite(f64),
}

impl Temperature {
    pub fn new(eta: f64) -> Result<Self> {
        if eta == 0.0 {
            Ok(Temperature::Greedy)
        } else if eta > 0.0 && eta.is_finite() {
            Ok(Temperature::Finite(eta))
        } else {
            Err(CoreError::InvalidConfig(format!(
                "temperature must be >= 0, got {eta}"
            )))
        }
    }
}

/// Softmax of logits / eta computed from a conditioned representation;
/// greedy mode returns a one-hot at the argmax (lowest id on ties).
pub fn next_token_distribution(
    params: &BackboneParams,
    conditioned: &Array1<f64>,
    temp: Temperature,
) -> Vec<f64> {
    let logits = params.logits(conditioned);
    match temp {
        Temperature::Greedy => {
            let mut p = vec![0.0; logits.len()];
            p[argmax(logits.as_slice().unwrap())] = 1.0;
            p
        }
        Temperature::Finite(eta) => softmax(&logits.mapv(|l| l / eta).to_vec()),
    }
}

/// Samples one segment after `prefix` (query plus history tokens) until the
/// terminator or `max_len` tokens.
pub fn generate_segment(
    params: &BackboneParams,
    omega: &ConditionerParams,
    prefix: &[u32],
    z: &LatentVector,
    temp: Temperature,
    max_len: usize,
    seed: u64,
) -> Segment {
    let mut rng = rng::rng(seed);
    let mut stream = prefix.to_vec();
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let h = omega.apply(&params.hidden(&stream), z);
        let p = next_token_distribution(params, &h, temp);
        let tok = match temp {
            Temperature::Greedy => argmax(&p) as u32,
            Temperature::Finite(_) => categorical(&p, &mut rng) as u32,
        };
        tokens.push(tok);
        stream.push(tok);
        if tok == TERMINATOR {
            return Segment {
                tokens,
                op_label: None,
                truncated: false,
            };
        }
    }
    Segment {
        tokens,
        op_label: None,
        truncated: true,
    }
}

/// Sum of per-token log-probabilities of `segment` after `prefix`.
pub fn step_log_likelihood(
    params: &BackboneParams,
    omega: &ConditionerParams,
    prefix: &[u32],
    z: &LatentVector,
    segment: &Segment,
    temp: Temperature,
) -> f64 {
    let mut stream = prefix.to_vec();
    let mut total = 0.0;
    for &tok in &segment.tokens {
        let h = omega.apply(&params.hidden(&stream), z);
        let p = next_token_distribution(params, &h, temp);
        total += p[tok as usize].ln();
        stream.push(tok);
    }
    total
}
