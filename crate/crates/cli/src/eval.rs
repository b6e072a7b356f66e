//! Evaluation protocol: N sampled chains per query; accuracy is the
//! fraction of queries with at least one correct chain, success rate the
//! fraction of chains that parse.

use ctrls::elbo::CtrlsModel;
use ctrls::env::{value_iteration_optimum, ChainMdp, ModChain, Task, ValueIteration};
use ctrls::policy::{rollout, ExplorationConfig, PolicyParams};
use ctrls::rng;
use ctrls::Exec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Outcome of one sampled chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub correct: bool,
    pub parsed: bool,
}

pub trait Agent: Sync {
    fn sample(&self, task: &Task, explore: &ExplorationConfig, seed: u64) -> Result<Sample>;
}

/// Latent-policy rollouts through the conditioned generator.
pub struct CtrlsAgent<'a> {
    pub env: &'a ModChain,
    pub model: &'a CtrlsModel,
    pub policy: &'a PolicyParams,
}

impl Agent for CtrlsAgent<'_> {
    fn sample(&self, task: &Task, explore: &ExplorationConfig, seed: u64) -> Result<Sample> {
        let t = rollout(self.env, self.model, self.policy, task, explore, seed)?;
        Ok(Sample {
            correct: t.reward.value == 1,
            parsed: t.parse_ok(),
        })
    }
}

/// Closed-loop optimal agent: observes the running value and plays the
/// value-iteration action; each step slips like the environment does.
pub struct OracleAgent {
    pub mdp: ChainMdp,
    plans: Vec<ValueIteration>,
}

impl OracleAgent {
    pub fn new(mdp: ChainMdp, tasks: &[Task]) -> Result<OracleAgent> {
        let plans = tasks
            .iter()
            .map(|t| value_iteration_optimum(&mdp, t.query.start_value, t.answer.value, 1.0))
            .collect::<ctrls::Result<Vec<_>>>()?;
        Ok(OracleAgent { mdp, plans })
    }

    /// Optimal success probability J* of each task.
    pub fn optima(&self) -> Vec<f64> {
        self.plans.iter().map(|p| p.optimum).collect()
    }

    fn plan(&self, task: &Task) -> &ValueIteration {
        let id = task.query.id;
        &self.plans[(id as usize) % self.plans.len()]
    }
}

impl Agent for OracleAgent {
    fn sample(&self, task: &Task, _explore: &ExplorationConfig, seed: u64) -> Result<Sample> {
        let plan = self.plan(task);
        let m = &self.mdp;
        let mut r = rng::rng(seed);
        let mut v = task.query.start_value % m.modulus;
        for t in 0..m.horizon {
            let mut a = plan.action(t, v);
            if m.slip > 0.0 && r.random::<f64>() < m.slip {
                a = r.random_range(0..m.ops.len());
            }
            v = m.ops[a].apply(v, m.modulus);
        }
        Ok(Sample {
            correct: v == task.answer.value % m.modulus,
            parsed: true,
        })
    }
}

/// Tasks numbered 0..n; a task's query id is its index, so agents can key
/// per-task state on it.
pub fn eval_tasks(env: &ModChain, n: usize, seed: u64) -> Vec<Task> {
    (0..n)
        .map(|q| {
            let mut t = env.generate_task(rng::derive_path(seed, &[0xe7a1, q as u64]));
            t.query.id = q as u64;
            t
        })
        .collect()
}

/// One (eta, epsilon) cell of the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub eta: f64,
    pub epsilon: f64,
    pub queries: usize,
    pub samples_per_query: usize,
    pub accuracy: f64,
    pub success_rate: f64,
    pub mean_reward: f64,
}

pub fn evaluate_cell(
    agent: &dyn Agent,
    tasks: &[Task],
    explore: &ExplorationConfig,
    seed: u64,
    exec: Exec,
) -> Result<CellReport> {
    let n = explore.samples_per_query;
    let per_query = exec.map(tasks.len(), |q| {
        (0..n)
            .map(|i| {
                agent.sample(
                    &tasks[q],
                    explore,
                    rng::derive_path(seed, &[q as u64, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()
    });
    let (mut hit, mut parsed, mut correct) = (0usize, 0usize, 0usize);
    for samples in per_query {
        let samples = samples?;
        hit += usize::from(samples.iter().any(|s| s.correct));
        parsed += samples.iter().filter(|s| s.parsed).count();
        correct += samples.iter().filter(|s| s.correct).count();
    }
    let total = (tasks.len() * n) as f64;
    Ok(CellReport {
        eta: explore.eta,
        epsilon: explore.epsilon,
        queries: tasks.len(),
        samples_per_query: n,
        accuracy: hit as f64 / tasks.len() as f64,
        success_rate: parsed as f64 / total,
        mean_reward: correct as f64 / total,
    })
}

/// Mean and standard error of any-of-N accuracy when query q succeeds per
/// sample with probability `p[q]`.
pub fn expected_accuracy(p: &[f64], n: usize) -> (f64, f64) {
    let hits: Vec<f64> = p.iter().map(|&p| 1.0 - (1.0 - p).powi(n as i32)).collect();
    let q = p.len() as f64;
    let mean = hits.iter().sum::<f64>() / q;
    let var = hits.iter().map(|h| h * (1.0 - h)).sum::<f64>() / (q * q);
    (mean, var.sqrt())
}

pub fn render_table(cells: &[CellReport]) -> String {
    let mut s = format!(
        "{:>6} {:>8} {:>9} {:>9} {:>9}\n",
        "eta", "epsilon", "Acc.", "Succ.", "reward"
    );
    for c in cells {
        s.push_str(&format!(
            "{:>6.2} {:>8.2} {:>9.4} {:>9.4} {:>9.4}\n",
            c.eta, c.epsilon, c.accuracy, c.success_rate, c.mean_reward
        ));
    }
    s
}
