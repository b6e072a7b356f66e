//! Flat run configuration: one TOML table, every key optional, unknown keys
//! rejected. `CTRLS_<KEY>` environment variables override file values.

use std::path::Path;

use ctrls::elbo::{ModelConfig, PretrainConfig, TrainScope};
use ctrls::env::{EnvConfig, Op};
use ctrls::policy::{EntropyKind, ExplorationConfig, RlConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "CTRLS_";
pub const ETA_GRID: [f64; 2] = [0.5, 0.7];
pub const EPSILON_GRID: [f64; 3] = [0.1, 0.3, 0.5];
pub const ALPHA_GRID: [f64; 2] = [0.0, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub modulus: u32,
    pub horizon: usize,
    pub ops: Vec<Op>,
    pub vocab_size: usize,
    pub tokens_per_op: usize,
    pub seg_len_min: usize,
    pub seg_len_max: usize,
    pub max_segment_len: usize,
    pub emission_purity: f64,
    pub min_emission_tv: f64,
    pub successor_bias: f64,
    pub slip: f64,
    pub hmm_seed: u64,
    /// Op chain shared by the fine-tuning and evaluation tasks; empty means
    /// chains are sampled from the ground-truth HMM like the corpus.
    pub program: Vec<usize>,
    pub n_sequences: usize,

    pub dim: usize,
    pub window: usize,
    pub rank: usize,
    pub n_states: usize,
    pub spectral_k: usize,
    pub beta: Option<f64>,

    pub epochs: usize,
    pub batch_size: usize,
    pub step_size_omega: f64,
    pub step_size_theta: f64,
    pub theta_epochs: usize,
    pub mc_samples: usize,
    pub lm_epochs: usize,
    pub lm_step_size: f64,
    pub train_eta: f64,
    pub cluster_query: bool,
    pub kmeans_restarts: usize,
    pub scope: TrainScope,
    /// Write elapsed milliseconds into the pretraining CSV (breaks
    /// byte-identical reruns).
    pub record_wallclock: bool,

    pub episodes: usize,
    pub rl_batch_size: usize,
    pub rl_step_size: f64,
    pub baseline: bool,
    pub tau_c: f64,
    pub init_concentration: f64,
    pub n_tasks: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub eta: f64,
    pub entropy: EntropyKind,

    pub samples_per_query: usize,
    pub eval_queries: usize,
    pub eval_etas: Vec<f64>,
    pub eval_epsilons: Vec<f64>,
    /// Restrict eta, epsilon and alpha to the published grid.
    pub strict_grid: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        let model = ModelConfig::default();
        let pre = PretrainConfig::default();
        let rl = RlConfig::default();
        let x = ExplorationConfig::default();
        RunConfig {
            seed: 0,
            modulus: env.modulus,
            horizon: env.horizon,
            ops: env.ops,
            vocab_size: env.vocab_size,
            tokens_per_op: env.tokens_per_op,
            seg_len_min: env.seg_len_min,
            seg_len_max: env.seg_len_max,
            max_segment_len: env.max_segment_len,
            emission_purity: env.emission_purity,
            min_emission_tv: env.min_emission_tv,
            successor_bias: env.successor_bias,
            slip: env.slip,
            hmm_seed: env.hmm_seed,
            program: vec![0, 1, 2, 3],
            n_sequences: 2000,
            dim: model.dim,
            window: model.window,
            rank: model.rank,
            n_states: 5,
            spectral_k: 1,
            beta: model.beta,
            epochs: pre.epochs,
            batch_size: pre.batch_size,
            step_size_omega: pre.step_size_omega,
            step_size_theta: pre.step_size_theta,
            theta_epochs: pre.theta_epochs,
            mc_samples: pre.mc_samples,
            lm_epochs: pre.lm_epochs,
            lm_step_size: pre.lm_step_size,
            train_eta: pre.train_eta,
            cluster_query: pre.cluster_query,
            kmeans_restarts: pre.kmeans_restarts,
            scope: pre.scope,
            record_wallclock: false,
            episodes: rl.episodes,
            rl_batch_size: rl.batch_size,
            rl_step_size: rl.step_size,
            baseline: rl.baseline,
            tau_c: rl.tau_c,
            init_concentration: rl.init_concentration,
            n_tasks: 64,
            epsilon: x.epsilon,
            alpha: x.alpha,
            eta: x.eta,
            entropy: x.entropy,
            samples_per_query: x.samples_per_query,
            eval_queries: 100,
            eval_etas: ETA_GRID.to_vec(),
            eval_epsilons: EPSILON_GRID.to_vec(),
            strict_grid: true,
        }
    }
}

fn set_text(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", items.join(", "))
}

fn on_grid(name: &str, value: f64, grid: &[f64]) -> Result<()> {
    if grid.iter().any(|g| (g - value).abs() < 1e-12) {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{name} = {value} is not on the grid; valid values are {} (set strict_grid = false to allow others)",
            set_text(grid)
        )))
    }
}

fn parse_override(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Reads `path` (defaults when absent), then applies `CTRLS_` overrides
    /// from `vars`, then validates.
    pub fn load<I>(path: Option<&Path>, vars: I) -> Result<RunConfig>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        RunConfig::load_over(table, vars)
    }

    /// Like [`RunConfig::load`] with `base` in place of a file.
    pub fn load_from<I>(base: &RunConfig, vars: I) -> Result<RunConfig>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let table = toml::Table::try_from(base).map_err(|e| CliError::Config(e.to_string()))?;
        RunConfig::load_over(table, vars)
    }

    fn load_over<I>(mut table: toml::Table, vars: I) -> Result<RunConfig>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|key| (key.to_ascii_lowercase(), v))
            })
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            table.insert(key, parse_override(&raw));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_process_env(path: Option<&Path>) -> Result<RunConfig> {
        RunConfig::load(path, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let core = |e: ctrls::CoreError| CliError::Config(e.to_string());
        self.env_config().validate().map_err(core)?;
        self.task_env_config().validate().map_err(core)?;
        self.model_config().validate().map_err(core)?;
        self.pretrain_config().validate().map_err(core)?;
        if self.n_sequences == 0 {
            return Err(CliError::Config("n_sequences must be positive".into()));
        }
        if self.n_tasks == 0
            || self.eval_queries == 0
            || self.episodes == 0
            || self.rl_batch_size == 0
        {
            return Err(CliError::Config(
                "n_tasks, eval_queries, episodes and rl_batch_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("rl_step_size", self.rl_step_size),
            ("tau_c", self.tau_c),
            ("init_concentration", self.init_concentration),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CliError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for &e in std::iter::once(&self.epsilon).chain(&self.eval_epsilons) {
            if !(0.0..=1.0).contains(&e) {
                return Err(CliError::Config(format!(
                    "epsilon = {e} is outside [0, 1]; grid values are {}",
                    set_text(&EPSILON_GRID)
                )));
            }
        }
        for &eta in std::iter::once(&self.eta).chain(&self.eval_etas) {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(CliError::Config(format!(
                    "eta = {eta} must be a positive temperature; grid values are {}",
                    set_text(&ETA_GRID)
                )));
            }
        }
        if self.eval_etas.is_empty() || self.eval_epsilons.is_empty() {
            return Err(CliError::Config(
                "eval_etas and eval_epsilons must be nonempty".into(),
            ));
        }
        self.exploration(self.eta, self.epsilon)
            .validate()
            .map_err(core)?;
        if self.strict_grid {
            on_grid("eta", self.eta, &ETA_GRID)?;
            on_grid("epsilon", self.epsilon, &EPSILON_GRID)?;
            on_grid("alpha", self.alpha, &ALPHA_GRID)?;
            for &v in &self.eval_etas {
                on_grid("eval_etas entry", v, &ETA_GRID)?;
            }
            for &v in &self.eval_epsilons {
                on_grid("eval_epsilons entry", v, &EPSILON_GRID)?;
            }
        }
        Ok(())
    }

    /// Environment that generates the training corpus.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            modulus: self.modulus,
            horizon: self.horizon,
            ops: self.ops.clone(),
            vocab_size: self.vocab_size,
            tokens_per_op: self.tokens_per_op,
            seg_len_min: self.seg_len_min,
            seg_len_max: self.seg_len_max,
            max_segment_len: self.max_segment_len,
            emission_purity: self.emission_purity,
            min_emission_tv: self.min_emission_tv,
            successor_bias: self.successor_bias,
            slip: self.slip,
            hmm_seed: self.hmm_seed,
            program: None,
        }
    }

    /// Environment for fine-tuning and evaluation tasks.
    pub fn task_env_config(&self) -> EnvConfig {
        EnvConfig {
            program: (!self.program.is_empty()).then(|| self.program.clone()),
            ..self.env_config()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            dim: self.dim,
            window: self.window,
            rank: self.rank,
            n_states: self.n_states,
            spectral_k: self.spectral_k,
            beta: self.beta,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            step_size_omega: self.step_size_omega,
            step_size_theta: self.step_size_theta,
            theta_epochs: self.theta_epochs,
            mc_samples: self.mc_samples,
            seed: self.seed,
            lm_epochs: self.lm_epochs,
            lm_step_size: self.lm_step_size,
            train_eta: self.train_eta,
            cluster_query: self.cluster_query,
            kmeans_restarts: self.kmeans_restarts,
            scope: self.scope,
            wallclock: self.record_wallclock,
        }
    }

    pub fn exploration(&self, eta: f64, epsilon: f64) -> ExplorationConfig {
        ExplorationConfig {
            epsilon,
            alpha: self.alpha,
            eta,
            samples_per_query: self.samples_per_query,
            entropy: self.entropy,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            episodes: self.episodes,
            batch_size: self.rl_batch_size,
            step_size: self.rl_step_size,
            seed: self.seed,
            baseline: self.baseline,
            tau_c: self.tau_c,
            init_concentration: self.init_concentration,
            exploration: self.exploration(self.eta, self.epsilon),
        }
    }
}
