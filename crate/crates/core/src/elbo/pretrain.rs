use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bound::{compute_elbo, ElboMode, LatentModelRef};
use crate::abstraction::{default_beta, embed_step, fit_centroids, latent_vector, Encoder};
use crate::backbone::{
    pretrain_lm, step_log_likelihood, step_log_likelihood_grad, BackboneParams, ConditionerParams,
    LatentVector, LmConfig, StepGrad, Temperature,
};
use crate::env::{CorpusRecord, Segment, Vocab};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::params::ParamSet;
use crate::rng;
use crate::simplex::StateDistribution;
use crate::transition::{fit_initial_logits, fit_transition, FitConfig, TransitionMatrix};

/// One training sequence: prompt tokens followed by reasoning segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub prompt: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl TrainingSequence {
    pub fn from_record(record: &CorpusRecord, vocab: &Vocab) -> Self {
        TrainingSequence {
            prompt: vocab.query_tokens(),
            segments: record.segments(),
        }
    }

    fn stream(&self) -> Vec<u32> {
        crate::backbone::context_stream(&self.prompt, &self.segments)
    }
}

/// Shapes of the generator, adapter, and latent abstraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden width d.
    pub dim: usize,
    pub window: usize,
    /// Adapter bottleneck r.
    pub rank: usize,
    /// Number of latent states K.
    pub n_states: usize,
    /// Eigenpairs per spectral embedding.
    pub spectral_k: usize,
    /// Soft-assignment temperature; mean squared nearest-centroid distance
    /// when absent.
    pub beta: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            dim: 8,
            window: 8,
            rank: 4,
            n_states: 8,
            spectral_k: 2,
            beta: None,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.spectral_k * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("window", self.window),
            ("rank", self.rank),
            ("spectral_k", self.spectral_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.n_states < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "n_states must be >= 2, got {}",
                self.n_states
            )));
        }
        if self.spectral_k > self.dim {
            return Err(CoreError::InvalidConfig(format!(
                "spectral_k = {} exceeds dim = {}",
                self.spectral_k, self.dim
            )));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "beta must be > 0, got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// Which generator parameters the conditioned updates touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    Adapter,
    #[default]
    AdapterAndHead,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for the generator-side parameters.
    pub step_size_omega: f64,
    /// Initial step size for the transition fit.
    pub step_size_theta: f64,
    pub theta_epochs: usize,
    /// Latent samples per step; 0 uses the deterministic relaxation.
    pub mc_samples: usize,
    pub seed: u64,
    pub lm_epochs: usize,
    pub lm_step_size: f64,
    /// Decoding temperature used inside the likelihood.
    pub train_eta: f64,
    /// Cluster the prompt representation with the steps and fit the
    /// prompt-to-first-step transition.
    pub cluster_query: bool,
    /// k-means++ restarts; the lowest-objective run is kept.
    pub kmeans_restarts: usize,
    pub scope: TrainScope,
    /// Record elapsed time per epoch; zero otherwise.
    pub wallclock: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 32,
            step_size_omega: 0.05,
            step_size_theta: 1.0,
            theta_epochs: 500,
            mc_samples: 0,
            seed: 0,
            lm_epochs: 10,
            lm_step_size: 0.5,
            train_eta: 1.0,
            cluster_query: true,
            kmeans_restarts: 10,
            scope: TrainScope::AdapterAndHead,
            wallclock: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.kmeans_restarts == 0 {
            return Err(CoreError::InvalidConfig(
                "batch_size and kmeans_restarts must be positive".into(),
            ));
        }
        for (name, v) in [
            ("step_size_omega", self.step_size_omega),
            ("step_size_theta", self.step_size_theta),
            ("lm_step_size", self.lm_step_size),
            ("train_eta", self.train_eta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::Finite(self.train_eta)
    }
}

/// The trained generator, encoder, and latent dynamics.
#[derive(Debug, Clone)]
pub struct CtrlsModel {
    pub generator: BackboneParams,
    pub conditioner: ConditionerParams,
    pub encoder: Encoder,
    pub transition: TransitionMatrix,
    pub init_logits: Vec<f64>,
}

impl CtrlsModel {
    pub fn latent_ref(&self, temperature: Temperature) -> LatentModelRef<'_> {
        LatentModelRef {
            generator: &self.generator,
            conditioner: &self.conditioner,
            centroids: &self.encoder.centroids,
            transition: &self.transition,
            init_logits: &self.init_logits,
            temperature,
        }
    }

    pub fn n_states(&self) -> usize {
        self.transition.k()
    }
}

/// One row of the pretraining metrics stream; values are per-sequence means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub lm_trace: Vec<f64>,
    pub kmeans_trace: Vec<f64>,
    pub transition_trace: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
    /// Posteriors s_{1:T} of every training sequence.
    pub posteriors: Vec<Vec<StateDistribution>>,
}

/// Soft states s_1..s_T of every sequence.
pub fn encode_corpus(
    encoder: &Encoder,
    data: &[TrainingSequence],
    exec: Exec,
) -> Result<Vec<Vec<StateDistribution>>> {
    exec.map_slice(data, |seq| {
        encoder.encode_sequence(&seq.prompt, &seq.segments)
    })
    .into_iter()
    .collect()
}

/// Mean per-sequence (recon, kl) of the bound over a corpus.
pub fn evaluate_elbo(
    model: &CtrlsModel,
    data: &[TrainingSequence],
    posteriors: &[Vec<StateDistribution>],
    mode: ElboMode,
    temperature: Temperature,
    exec: Exec,
) -> Result<(f64, f64)> {
    let lm = model.latent_ref(temperature);
    let parts = exec.map(data.len(), |i| {
        let mode = match mode {
            ElboMode::MonteCarlo { samples, seed } => ElboMode::MonteCarlo {
                samples,
                seed: rng::derive(seed, i as u64),
            },
            m => m,
        };
        compute_elbo(
            &lm,
            &data[i].prompt,
            &data[i].segments,
            &posteriors[i],
            mode,
        )
    });
    let (mut recon, mut kl) = (0.0, 0.0);
    for p in parts {
        let b = p?;
        recon += b.recon_sum();
        kl += b.kl_sum();
    }
    let n = data.len() as f64;
    Ok((recon / n, kl / n))
}

/// Latent vectors (with weights) conditioning each step of a sequence: the
/// relaxed mixture, or `mc_samples` hard draws.
fn step_latents(
    model: &CtrlsModel,
    posteriors: &[StateDistribution],
    mc_samples: usize,
    seed: u64,
) -> Vec<Vec<(LatentVector, f64)>> {
    let mut r = rng::rng(seed);
    posteriors
        .iter()
        .map(|s| {
            if mc_samples == 0 {
                vec![(latent_vector(s, &model.encoder.centroids), 1.0)]
            } else {
                (0..mc_samples)
                    .map(|_| {
                        let j = rng::categorical(s.as_slice(), &mut r);
                        (
                            LatentVector(model.encoder.centroids.row(j).to_vec()),
                            1.0 / mc_samples as f64,
                        )
                    })
                    .collect()
            }
        })
        .collect()
}

fn sequence_grad(
    model: &CtrlsModel,
    seq: &TrainingSequence,
    latents: &[Vec<(LatentVector, f64)>],
    temperature: Temperature,
) -> StepGrad {
    let mut total: Option<StepGrad> = None;
    let mut prefix = seq.prompt.clone();
    for (seg, zs) in seq.segments.iter().zip(latents) {
        for (z, w) in zs {
            let mut g = step_log_likelihood_grad(
                &model.generator,
                &model.conditioner,
                &prefix,
                z,
                &seg.tokens,
                temperature,
            );
            match total.as_mut() {
                Some(t) => t.accumulate(&g, *w),
                None => {
                    g.scale(*w);
                    total = Some(g);
                }
            }
        }
        prefix.extend_from_slice(&seg.tokens);
    }
    total.expect("nonempty sequence")
}

fn sequence_log_likelihood(
    model: &CtrlsModel,
    seq: &TrainingSequence,
    latents: &[Vec<(LatentVector, f64)>],
    temperature: Temperature,
) -> f64 {
    let mut total = 0.0;
    let mut prefix = seq.prompt.clone();
    for (seg, zs) in seq.segments.iter().zip(latents) {
        for (z, w) in zs {
            total += w * step_log_likelihood(
                &model.generator,
                &model.conditioner,
                &prefix,
                z,
                seg,
                temperature,
            );
        }
        prefix.extend_from_slice(&seg.tokens);
    }
    total
}

fn apply_scope(g: &mut BackboneParams, scope: TrainScope) {
    match scope {
        TrainScope::All => {}
        TrainScope::AdapterAndHead => {
            g.embed.fill(0.0);
            g.pos_weights.fill(0.0);
            g.hidden_w.fill(0.0);
            g.hidden_b.fill(0.0);
        }
        TrainScope::Adapter => *g = g.zeros_like(),
    }
}

/// Conditioned supervised updates of the generator with posteriors, centroids
/// and transition held fixed. Epochs are numbered from `first_epoch`.
pub fn train_generator(
    model: &mut CtrlsModel,
    data: &[TrainingSequence],
    posteriors: &[Vec<StateDistribution>],
    cfg: &PretrainConfig,
    first_epoch: usize,
    exec: Exec,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Empty("training corpus"));
    }
    let temp = cfg.temperature();
    let mode = ElboMode::from_samples(cfg.mc_samples, rng::derive(cfg.seed, 0xe1b0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.step_size_omega;
    for epoch in first_epoch..first_epoch + cfg.epochs {
        let start = Instant::now();
        let mut shuffle = rng::rng(rng::derive_path(cfg.seed, &[0x5ca1e, epoch as u64]));
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let latents: Vec<_> = batch
                .iter()
                .map(|&i| {
                    step_latents(
                        model,
                        &posteriors[i],
                        cfg.mc_samples,
                        rng::derive_path(cfg.seed, &[epoch as u64, i as u64]),
                    )
                })
                .collect();
            let frozen = &*model;
            let grads = exec.map(batch.len(), |b| {
                sequence_grad(frozen, &data[batch[b]], &latents[b], temp)
            });
            let mut total = grads[0].clone();
            for g in &grads[1..] {
                total.accumulate(g, 1.0);
            }
            if !total.conditioner.is_finite() || !total.backbone.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite generator gradient at epoch {epoch}"
                )));
            }
            apply_scope(&mut total.backbone, cfg.scope);
            let tokens: usize = batch
                .iter()
                .map(|&i| {
                    data[i]
                        .segments
                        .iter()
                        .map(|s| s.tokens.len())
                        .sum::<usize>()
                })
                .sum();
            // a step that lowers this batch's likelihood is undone and halved
            loop {
                let mut cand = model.clone();
                cand.conditioner
                    .add_scaled(&total.conditioner, lr / tokens as f64);
                cand.generator
                    .add_scaled(&total.backbone, lr / tokens as f64);
                let ll: f64 = exec
                    .map(batch.len(), |b| {
                        sequence_log_likelihood(&cand, &data[batch[b]], &latents[b], temp)
                    })
                    .iter()
                    .sum();
                if ll >= total.log_likelihood {
                    *model = cand;
                    break;
                }
                lr *= 0.5;
                if lr < cfg.step_size_omega * 1e-6 {
                    break;
                }
            }
        }
        let (recon, kl) = evaluate_elbo(model, data, posteriors, mode, temp, exec)?;
        if !recon.is_finite() || !kl.is_finite() {
            return Err(CoreError::Numeric(format!(
                "bound is not finite at epoch {epoch}"
            )));
        }
        metrics.push(EpochMetrics {
            epoch,
            recon,
            kl,
            elbo: recon - kl,
            wallclock_ms: if cfg.wallclock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    Ok(metrics)
}

/// Staged offline training: language-model warm-up of the generator, then
/// (1) spectral embedding of every step, (2) centroids and soft assignments,
/// (3) transition fitting, (4) conditioned generator updates.
pub fn pretrain(
    data: &[TrainingSequence],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<(CtrlsModel, PretrainReport)> {
    model_cfg.validate().map_err(|e| e.in_stage("config"))?;
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    if data.is_empty() || data.iter().any(|s| s.segments.is_empty()) {
        return Err(CoreError::Empty("training corpus").in_stage("config"));
    }
    if let Some(tok) = data
        .iter()
        .flat_map(|s| s.stream())
        .find(|&t| t as usize >= model_cfg.vocab_size)
    {
        return Err(CoreError::Format(format!(
            "token {tok} outside vocabulary of {}",
            model_cfg.vocab_size
        ))
        .in_stage("config"));
    }

    let warmup = |e: CoreError| e.in_stage("warm-up");
    let mut generator = BackboneParams::init(
        model_cfg.vocab_size,
        model_cfg.dim,
        model_cfg.window,
        rng::derive(cfg.seed, 1),
    )
    .map_err(warmup)?;
    let streams: Vec<(Vec<u32>, usize)> =
        data.iter().map(|s| (s.stream(), s.prompt.len())).collect();
    let lm_cfg = LmConfig {
        epochs: cfg.lm_epochs,
        batch_size: cfg.batch_size,
        step_size: cfg.lm_step_size,
        seed: rng::derive(cfg.seed, 2),
    };
    let lm_trace = pretrain_lm(&mut generator, &streams, &lm_cfg, exec).map_err(warmup)?;

    // (1) spectral embeddings from a frozen snapshot of the generator
    let embed = |e: CoreError| e.in_stage("spectral embedding");
    let snapshot = generator.clone();
    let k = model_cfg.spectral_k;
    let step_points: Vec<Vec<Vec<f64>>> = exec
        .map_slice(data, |seq| {
            (0..seq.segments.len())
                .map(|t| embed_step(&snapshot, k, &seq.prompt, &seq.segments, Some(t)).map(|e| e.e))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<_>>()
        .map_err(embed)?;
    let mut points: Vec<Vec<f64>> = step_points.iter().flatten().cloned().collect();
    if cfg.cluster_query {
        for seq in data {
            points.push(
                embed_step(&snapshot, k, &seq.prompt, &[], None)
                    .map_err(embed)?
                    .e,
            );
        }
    }

    // (2) centroids and soft assignments
    let cluster = |e: CoreError| e.in_stage("clustering");
    let fit = fit_centroids(
        &points,
        model_cfg.n_states,
        cfg.kmeans_restarts,
        rng::derive(cfg.seed, 3),
        exec,
    )
    .map_err(cluster)?;
    let beta = model_cfg
        .beta
        .unwrap_or_else(|| default_beta(&points, &fit.centroids));
    let encoder = Encoder {
        backbone: snapshot,
        k,
        centroids: fit.centroids,
        beta,
    };
    let posteriors = encode_corpus(&encoder, data, exec).map_err(cluster)?;

    // (3) transition kernel and initial prior
    let trans = |e: CoreError| e.in_stage("transition fit");
    let mut pairs = Vec::new();
    for (seq, post) in data.iter().zip(&posteriors) {
        if cfg.cluster_query {
            pairs.push((
                encoder.encode_state(&seq.prompt, &[]).map_err(trans)?,
                post[0].clone(),
            ));
        }
        for w in post.windows(2) {
            pairs.push((w[0].clone(), w[1].clone()));
        }
    }
    let firsts: Vec<StateDistribution> = posteriors.iter().map(|p| p[0].clone()).collect();
    let init_logits = fit_initial_logits(&firsts).map_err(trans)?;
    let mut transition = TransitionMatrix::uniform(model_cfg.n_states);
    let transition_trace = if pairs.is_empty() {
        Vec::new()
    } else {
        let fit_cfg = FitConfig {
            epochs: cfg.theta_epochs,
            step_size: cfg.step_size_theta,
            ..FitConfig::default()
        };
        fit_transition(&mut transition, &pairs, &fit_cfg).map_err(trans)?
    };

    // (4) conditioned generator updates
    let conditioner = ConditionerParams::init(
        model_cfg.dim,
        model_cfg.rank,
        model_cfg.latent_dim(),
        rng::derive(cfg.seed, 4),
    )
    .map_err(|e| e.in_stage("generator updates"))?;
    let mut model = CtrlsModel {
        generator,
        conditioner,
        encoder,
        transition,
        init_logits,
    };
    let epochs = train_generator(&mut model, data, &posteriors, cfg, 0, exec)
        .map_err(|e| e.in_stage("generator updates"))?;

    Ok((
        model,
        PretrainReport {
            lm_trace,
            kmeans_trace: fit.objective_trace,
            transition_trace,
            epochs,
            posteriors,
        },
    ))
}
