use serde::{Deserialize, Serialize};

use super::dirichlet::{
    dirichlet_log_density, dirichlet_score, policy_entropy, policy_entropy_grad, EntropyKind,
};
use super::params::{sample_action, Branch, PolicyParams};
use crate::abstraction::latent_vector;
use crate::backbone::{generate_segment, Temperature};
use crate::elbo::CtrlsModel;
use crate::env::{reward, ModChain, ParsedAnswer, Query, Reward, Segment, Task};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::params::ParamSet;
use crate::rng;
use crate::simplex::StateDistribution;
use crate::transition::TransitionMatrix;

/// Exploration and sampling knobs of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    pub epsilon: f64,
    /// Entropy-bonus weight.
    pub alpha: f64,
    /// Decoding temperature.
    pub eta: f64,
    /// Samples per query at evaluation.
    pub samples_per_query: usize,
    pub entropy: EntropyKind,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            epsilon: 0.1,
            alpha: 0.01,
            eta: 0.5,
            samples_per_query: 20,
            entropy: EntropyKind::Categorical,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(CoreError::InvalidConfig(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.samples_per_query == 0 {
            return Err(CoreError::InvalidConfig(
                "samples_per_query must be positive".into(),
            ));
        }
        Temperature::new(self.eta).map(|_| ())
    }
}

/// One latent transition and the segment it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Policy input s_{t-1}.
    pub state: StateDistribution,
    /// Sampled action a_t, which becomes s_t.
    pub action: StateDistribution,
    pub segment: Segment,
    /// log pi(a_t | s_{t-1}) under the policy Dirichlet.
    pub log_prob: f64,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query: Query,
    pub steps: Vec<Step>,
    pub answer: ParsedAnswer,
    pub reward: Reward,
    /// Some segment hit the length cap before its terminator.
    pub truncated: bool,
}

impl Trajectory {
    pub fn parse_ok(&self) -> bool {
        !self.reward.parse_failure
    }
}

/// Samples one reasoning chain: s_0 from the prompt, then for every step
/// a_t ~ policy (epsilon-mixed), s_t := a_t, z_t = sum a_tj gamma_j, and a
/// segment generated under z_t. Deterministic in `seed`.
pub fn rollout(
    env: &ModChain,
    model: &CtrlsModel,
    policy: &PolicyParams,
    task: &Task,
    explore: &ExplorationConfig,
    seed: u64,
) -> Result<Trajectory> {
    if policy.k() != model.n_states() {
        return Err(CoreError::DimensionMismatch {
            context: "policy states",
            expected: model.n_states(),
            actual: policy.k(),
        });
    }
    let temp = Temperature::new(explore.eta)?;
    let prompt = env.vocab.query_tokens();
    let mut state = model.encoder.encode_state(&prompt, &[])?;
    let mut prefix = prompt;
    let mut steps = Vec::with_capacity(task.query.horizon);
    for t in 0..task.query.horizon {
        let c = policy.forward(&state)?;
        let mut r = rng::rng(rng::derive_path(seed, &[t as u64, 0]));
        let (action, branch) = sample_action(&c, explore.epsilon, &mut r)?;
        let log_prob = dirichlet_log_density(&c, &action)?;
        let z = latent_vector(&action, &model.encoder.centroids);
        let segment = generate_segment(
            &model.generator,
            &model.conditioner,
            &prefix,
            &z,
            temp,
            env.config.max_segment_len,
            rng::derive_path(seed, &[t as u64, 1]),
        );
        prefix.extend_from_slice(&segment.tokens);
        steps.push(Step {
            state,
            action: action.clone(),
            segment,
            log_prob,
            branch,
        });
        state = action;
    }
    let segments: Vec<Segment> = steps.iter().map(|s| s.segment.clone()).collect();
    let mut r = rng::rng(rng::derive(seed, u64::MAX));
    let answer = env.answer_from_segments(&task.query, &segments, &mut r);
    Ok(Trajectory {
        query: task.query.clone(),
        truncated: segments.iter().any(|s| s.truncated),
        reward: reward(&answer, &task.answer),
        answer,
        steps,
    })
}

/// Policy-gradient estimate over a batch.
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub grad: PolicyParams,
    pub grad_norm: f64,
    /// Mean of R + alpha * sum_t H over the batch.
    pub objective: f64,
    /// Mean per-step entropy over visited states.
    pub mean_entropy: f64,
}

fn returns(batch: &[Trajectory]) -> Vec<f64> {
    batch.iter().map(|t| t.reward.value as f64).collect()
}

/// Per-trajectory weight R + alpha * sum_t H_t, optionally centered by the
/// leave-one-out batch mean.
fn trajectory_weights(
    policy: &PolicyParams,
    batch: &[Trajectory],
    rewards: &[f64],
    alpha: f64,
    kind: EntropyKind,
    baseline: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut weights = Vec::with_capacity(batch.len());
    let mut entropies = Vec::with_capacity(batch.len());
    for (traj, &r) in batch.iter().zip(rewards) {
        let h = traj
            .steps
            .iter()
            .map(|s| Ok(policy_entropy(&policy.forward(&s.state)?, kind)))
            .collect::<Result<Vec<f64>>>()?;
        weights.push(r + alpha * h.iter().sum::<f64>());
        entropies.push(h);
    }
    if baseline {
        weights = leave_one_out(&weights);
    }
    Ok((weights, entropies))
}

/// mean over trajectories of w * sum_{policy steps} grad log pi(a_t|s_t),
/// with w = R + alpha sum_t H_t (leave-one-out centered when `baseline`),
/// plus the direct alpha * sum_t grad H_t.
pub fn policy_gradient(
    policy: &PolicyParams,
    batch: &[Trajectory],
    rewards: &[f64],
    alpha: f64,
    kind: EntropyKind,
    baseline: bool,
) -> Result<PolicyGradient> {
    if batch.is_empty() {
        return Err(CoreError::Empty("trajectory batch"));
    }
    if rewards.len() != batch.len() {
        return Err(CoreError::DimensionMismatch {
            context: "rewards",
            expected: batch.len(),
            actual: rewards.len(),
        });
    }
    let (weights, entropies) = trajectory_weights(policy, batch, rewards, alpha, kind, baseline)?;
    let mut grad = policy.zeros_like();
    let n = batch.len() as f64;
    let objective = batch
        .iter()
        .zip(rewards)
        .zip(&entropies)
        .map(|((_, r), h)| r + alpha * h.iter().sum::<f64>())
        .sum::<f64>()
        / n;
    for (traj, &weight) in batch.iter().zip(&weights) {
        for step in &traj.steps {
            let c = policy.forward(&step.state)?;
            if step.branch == Branch::Policy && weight != 0.0 {
                let score = dirichlet_score(&c, &step.action)?;
                policy.backward(&step.state, &score, weight / n, &mut grad);
            }
            if alpha != 0.0 {
                policy.backward(
                    &step.state,
                    &policy_entropy_grad(&c, kind),
                    alpha / n,
                    &mut grad,
                );
            }
        }
    }
    if !grad.is_finite() {
        return Err(CoreError::Numeric("non-finite policy gradient".into()));
    }
    let h_count: usize = entropies.iter().map(Vec::len).sum();
    let h_sum: f64 = entropies.iter().flatten().sum();
    Ok(PolicyGradient {
        grad_norm: grad.norm_sq().sqrt(),
        grad,
        objective,
        mean_entropy: if h_count > 0 {
            h_sum / h_count as f64
        } else {
            0.0
        },
    })
}

/// Differentiable stand-in whose gradient equals [`policy_gradient`]: the
/// trajectory weights are evaluated at `weights_at` and held fixed.
pub fn surrogate_objective(
    policy: &PolicyParams,
    weights_at: &PolicyParams,
    batch: &[Trajectory],
    rewards: &[f64],
    alpha: f64,
    kind: EntropyKind,
    baseline: bool,
) -> Result<f64> {
    let (weights, _) = trajectory_weights(weights_at, batch, rewards, alpha, kind, baseline)?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (traj, &weight) in batch.iter().zip(&weights) {
        for s in &traj.steps {
            let c = policy.forward(&s.state)?;
            if s.branch == Branch::Policy {
                total += weight * dirichlet_log_density(&c, &s.action)? / n;
            }
            total += alpha * policy_entropy(&c, kind) / n;
        }
    }
    Ok(total)
}

/// One ascent step on the batch's rewards.
pub fn reinforce_update(
    policy: &mut PolicyParams,
    batch: &[Trajectory],
    alpha: f64,
    step_size: f64,
    kind: EntropyKind,
    baseline: bool,
) -> Result<PolicyGradient> {
    let g = policy_gradient(policy, batch, &returns(batch), alpha, kind, baseline)?;
    policy.add_scaled(&g.grad, step_size);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Total trajectories.
    pub episodes: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Center each trajectory weight by the leave-one-out batch mean.
    pub baseline: bool,
    /// Concentration scale tau_c of the policy head.
    pub tau_c: f64,
    /// Total concentration at each vertex when the policy is initialized
    /// from the pretrained kernel.
    pub init_concentration: f64,
    pub exploration: ExplorationConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            episodes: 2000,
            batch_size: 16,
            step_size: 3.0,
            seed: 0,
            baseline: true,
            tau_c: 1.0,
            init_concentration: 0.1,
            exploration: ExplorationConfig::default(),
        }
    }
}

impl RlConfig {
    /// Policy whose mean at every vertex matches the pretrained kernel.
    pub fn init_policy(&self, transition: &TransitionMatrix) -> Result<PolicyParams> {
        PolicyParams::from_transition(transition, self.tau_c, self.init_concentration)
    }
}

/// `r_i - mean_{j != i} r_j`; unchanged for a batch of one.
pub fn leave_one_out(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n < 2 {
        return rewards.to_vec();
    }
    let total: f64 = rewards.iter().sum();
    rewards
        .iter()
        .map(|&r| r - (total - r) / (n - 1) as f64)
        .collect()
}

/// One row of the learning curve, per update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Reward assigned to a finished trajectory.
pub type RewardFn<'a> = &'a (dyn Fn(&Trajectory) -> f64 + Sync);

/// Alternates parallel rollout batches (cycling through `tasks`) with
/// REINFORCE updates. Generator, encoder, and centroids stay frozen.
pub fn rl_finetune(
    env: &ModChain,
    model: &CtrlsModel,
    policy: &mut PolicyParams,
    tasks: &[Task],
    cfg: &RlConfig,
    exec: Exec,
) -> Result<Vec<CurveRow>> {
    rl_finetune_with(env, model, policy, tasks, cfg, exec, &|t: &Trajectory| {
        t.reward.value as f64
    })
}

pub fn rl_finetune_with(
    env: &ModChain,
    model: &CtrlsModel,
    policy: &mut PolicyParams,
    tasks: &[Task],
    cfg: &RlConfig,
    exec: Exec,
    reward_fn: RewardFn,
) -> Result<Vec<CurveRow>> {
    cfg.exploration.validate()?;
    if tasks.is_empty() {
        return Err(CoreError::Empty("task set"));
    }
    if cfg.batch_size == 0 || !(cfg.step_size > 0.0) {
        return Err(CoreError::InvalidConfig(
            "batch_size and step_size must be positive".into(),
        ));
    }
    let mut curve = Vec::new();
    let mut done = 0;
    let mut update = 0u64;
    while done < cfg.episodes {
        let n = cfg.batch_size.min(cfg.episodes - done);
        let frozen = &*policy;
        let batch = exec
            .map(n, |i| {
                let task = &tasks[(done + i) % tasks.len()];
                rollout(
                    env,
                    model,
                    frozen,
                    task,
                    &cfg.exploration,
                    rng::derive_path(cfg.seed, &[update, i as u64]),
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = batch.iter().map(reward_fn).collect();
        let x = &cfg.exploration;
        let g = policy_gradient(policy, &batch, &rewards, x.alpha, x.entropy, cfg.baseline)?;
        policy.add_scaled(&g.grad, cfg.step_size);
        curve.push(CurveRow {
            episode: update as usize,
            mean_reward: rewards.iter().sum::<f64>() / n as f64,
            success_rate: batch.iter().filter(|t| t.parse_ok()).count() as f64 / n as f64,
            entropy: g.mean_entropy,
            grad_norm: g.grad_norm,
        });
        done += n;
        update += 1;
    }
    Ok(curve)
}

/// Mean categorical entropy of the policy over the K vertices.
pub fn vertex_entropy(policy: &PolicyParams, kind: EntropyKind) -> Result<f64> {
    let k = policy.k();
    let mut h = 0.0;
    for i in 0..k {
        h += policy_entropy(&policy.forward(&StateDistribution::one_hot(k, i))?, kind);
    }
    Ok(h / k as f64)
}
