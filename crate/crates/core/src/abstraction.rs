//! Thought abstraction: per-step spectral embeddings of the generator's
//! token representations, k-means centroids over those embeddings, and
//! soft assignment of a step to the centroids.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, LatentVector, TokenEmbeddingMatrix};
use crate::env::Segment;
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::linalg::symmetric_eigen;
use crate::rng;
use crate::simplex::StateDistribution;

/// Eigenvalues within this fraction of the largest are treated as tied,
/// and eigenvalues below it as zero.
const EIGEN_TOL: f64 = 1e-12;
/// Eigenvector components at or below this magnitude do not decide the sign.
const SIGN_TOL: f64 = 1e-12;

pub const MAX_LLOYD_ITERS: usize = 200;
pub const LLOYD_SHIFT_TOL: f64 = 1e-8;

/// G = E^T E for a segment's token representations.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Array2<f64>);

impl GramMatrix {
    pub fn of(e: &TokenEmbeddingMatrix) -> GramMatrix {
        GramMatrix(e.0.t().dot(&e.0))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// e = [sqrt(l_1) q_1; ...; sqrt(l_k) q_k] from the top-k eigenpairs of G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEmbedding {
    pub e: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

fn canonical_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > SIGN_TOL) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Eigenpairs of a symmetric PSD matrix sorted by eigenvalue (descending),
/// eigenvectors sign-canonicalized (first non-negligible component
/// positive); near-ties ordered by the canonical vectors lexicographically.
pub fn sorted_eigenpairs(g: &Array2<f64>) -> Vec<(f64, Vec<f64>)> {
    let (vals, vecs) = symmetric_eigen(g);
    let lmax = vals.iter().copied().fold(0.0, f64::max);
    let tol = EIGEN_TOL * lmax.max(f64::MIN_POSITIVE);
    let mut pairs: Vec<(f64, Vec<f64>)> = vals
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let mut q = vecs.column(j).to_vec();
            canonical_sign(&mut q);
            (if l <= tol { 0.0 } else { l }, q)
        })
        .collect();
    pairs.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= tol {
            a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal)
        } else {
            b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal)
        }
    });
    pairs
}

pub fn spectral_embed(e: &TokenEmbeddingMatrix, k: usize) -> Result<SpectralEmbedding> {
    let d = e.dim();
    if k == 0 || k > d {
        return Err(CoreError::InvalidConfig(format!(
            "need 1 <= k <= d, got k = {k}, d = {d}"
        )));
    }
    let g = GramMatrix::of(e);
    let pairs = sorted_eigenpairs(g.matrix());
    let mut out = Vec::with_capacity(k * d);
    let mut eigenvalues = Vec::with_capacity(k);
    for (l, q) in pairs.into_iter().take(k) {
        let scale = l.sqrt();
        out.extend(q.iter().map(|x| scale * x));
        eigenvalues.push(l);
    }
    Ok(SpectralEmbedding {
        e: out,
        eigenvalues,
    })
}

/// K cluster centres in spectral-embedding space, lexicographically ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids(Array2<f64>);

impl Centroids {
    pub fn new(vectors: Array2<f64>) -> Result<Centroids> {
        if vectors.nrows() < 2 {
            return Err(CoreError::InvalidConfig(
                "need at least two centroids".into(),
            ));
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Numeric("non-finite centroid".into()));
        }
        let c = Centroids(vectors);
        if c.min_pairwise_distance() <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "centroids must be pairwise distinct".into(),
            ));
        }
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.0.row(j).to_slice().expect("row-major centroids")
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.k() {
            for b in (a + 1)..self.k() {
                best = best.min(sq_dist(self.row(a), self.row(b)).sqrt());
            }
        }
        best
    }

    /// Index of the nearest centroid and its squared distance.
    pub fn nearest(&self, e: &[f64]) -> (usize, f64) {
        (0..self.k())
            .map(|j| (j, sq_dist(e, self.row(j))))
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            )
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Centroids,
    /// Sum of squared distances to the nearest centroid, once per Lloyd
    /// iteration (including the seeding).
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn count_distinct(points: &[Vec<f64>], cap: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

fn assign(points: &[Vec<f64>], centres: &[Vec<f64>], exec: Exec) -> Vec<(usize, f64)> {
    exec.map_slice(points, |p| {
        centres
            .iter()
            .enumerate()
            .map(|(j, c)| (j, sq_dist(p, c)))
            .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
    })
}

/// Lloyd's algorithm with k-means++ seeding, restarted `restarts` times;
/// keeps the run with the lowest final objective (earliest on ties). Each
/// run stops when no centroid moves more than 1e-8 or after 200
/// iterations. Deterministic in `seed`.
pub fn fit_centroids(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    seed: u64,
    exec: Exec,
) -> Result<KMeansFit> {
    if restarts == 0 {
        return Err(CoreError::InvalidConfig(
            "k-means needs at least one restart".into(),
        ));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts {
        let fit = lloyd(points, k, rng::derive(seed, r as u64), exec)?;
        let better = match &best {
            Some(b) => fit.objective_trace.last() < b.objective_trace.last(),
            None => true,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, exec: Exec) -> Result<KMeansFit> {
    if k < 2 {
        return Err(CoreError::InvalidConfig(format!("K must be >= 2, got {k}")));
    }
    let distinct = count_distinct(points, k);
    if distinct < k {
        return Err(CoreError::TooFewPoints {
            needed: k,
            found: distinct,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(CoreError::DimensionMismatch {
            context: "fit_centroids",
            expected: dim,
            actual: points.iter().find(|p| p.len() != dim).unwrap().len(),
        });
    }

    let mut rng = rng::rng(seed);
    let mut centres: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|x| *x > 0.0).unwrap();
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 && u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centres.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centres[centres.len() - 1]));
        }
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut assignment = assign(points, &centres, exec);
    trace.push(assignment.iter().map(|a| a.1).sum());
    while iterations < MAX_LLOYD_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(j, _)) in points.iter().zip(&assignment) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        let mut taken: Vec<usize> = Vec::new();
        for j in 0..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                // empty cluster: move it to the worst-served point
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| assignment[a].1.partial_cmp(&assignment[b].1).unwrap())
                    .unwrap();
                taken.push(far);
                points[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centres[j]).sqrt());
            centres[j] = new;
        }
        assignment = assign(points, &centres, exec);
        trace.push(assignment.iter().map(|a| a.1).sum());
        if shift < LLOYD_SHIFT_TOL {
            break;
        }
    }

    centres.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let flat: Vec<f64> = centres.concat();
    Ok(KMeansFit {
        centroids: Centroids::new(Array2::from_shape_vec((k, dim), flat).expect("shape"))?,
        objective_trace: trace,
        iterations,
    })
}

/// s_j proportional to exp(-||e - gamma_j||^2 / beta).
pub fn soft_assign(e: &[f64], centroids: &Centroids, beta: f64) -> Result<StateDistribution> {
    if e.len() != centroids.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "soft_assign",
            expected: centroids.dim(),
            actual: e.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "beta must be > 0, got {beta}"
        )));
    }
    let logits: Vec<f64> = (0..centroids.k())
        .map(|j| -sq_dist(e, centroids.row(j)) / beta)
        .collect();
    Ok(StateDistribution::from_logits(&logits))
}

/// z = sum_j s_j gamma_j.
pub fn latent_vector(s: &StateDistribution, centroids: &Centroids) -> LatentVector {
    let mut z = vec![0.0; centroids.dim()];
    for j in 0..centroids.k() {
        let w = s[j];
        if w != 0.0 {
            z.iter_mut()
                .zip(centroids.row(j))
                .for_each(|(a, g)| *a += w * g);
        }
    }
    LatentVector(z)
}

/// Mean squared distance from each point to its nearest centroid.
pub fn default_beta(points: &[Vec<f64>], centroids: &Centroids) -> f64 {
    let total: f64 = points.iter().map(|p| centroids.nearest(p).1).sum();
    (total / points.len() as f64).max(1e-12)
}

/// The variational posterior: a frozen snapshot of the generator's
/// representation, spectral embedding, and soft assignment.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub backbone: BackboneParams,
    pub k: usize,
    pub centroids: Centroids,
    pub beta: f64,
}

/// Token representations of segment `t` of `history` (or of the query
/// when `t` is None), computed with the preceding context.
pub fn step_representation(
    backbone: &BackboneParams,
    query_tokens: &[u32],
    history: &[Segment],
    t: Option<usize>,
) -> TokenEmbeddingMatrix {
    let Some(t) = t else {
        return backbone.hidden_rows(query_tokens, 0);
    };
    let mut stream = query_tokens.to_vec();
    for seg in &history[..t] {
        stream.extend_from_slice(&seg.tokens);
    }
    let start = stream.len();
    let seg = &history[t];
    let content = seg.content();
    if !content.is_empty() {
        stream.extend_from_slice(content);
    } else if let Some(&tok) = seg.tokens.first() {
        stream.push(tok);
    } else {
        // empty segment: fall back to the last context token
        return backbone.hidden_rows(&stream, start - 1);
    }
    backbone.hidden_rows(&stream, start)
}

pub fn embed_step(
    backbone: &BackboneParams,
    k: usize,
    query_tokens: &[u32],
    history: &[Segment],
    t: Option<usize>,
) -> Result<SpectralEmbedding> {
    spectral_embed(&step_representation(backbone, query_tokens, history, t), k)
}

impl Encoder {
    /// State after `history`; the query alone when `history` is empty.
    pub fn encode_state(
        &self,
        query_tokens: &[u32],
        history: &[Segment],
    ) -> Result<StateDistribution> {
        let t = history.len().checked_sub(1);
        let e = embed_step(&self.backbone, self.k, query_tokens, history, t)?;
        soft_assign(&e.e, &self.centroids, self.beta)
    }

    /// States s_1..s_T for every prefix of `segments`.
    pub fn encode_sequence(
        &self,
        query_tokens: &[u32],
        segments: &[Segment],
    ) -> Result<Vec<StateDistribution>> {
        (0..segments.len())
            .map(|t| {
                let e = embed_step(&self.backbone, self.k, query_tokens, segments, Some(t))?;
                soft_assign(&e.e, &self.centroids, self.beta)
            })
            .collect()
    }

    pub fn latent(&self, s: &StateDistribution) -> LatentVector {
        latent_vector(s, &self.centroids)
    }
}
