use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ctrls::elbo::{encode_corpus, pretrain, train_generator, EpochMetrics, TrainingSequence};
use ctrls::env::{read_corpus, write_corpus, ChainMdp, ModChain, CORPUS_SCHEMA_VERSION};
use ctrls::params::ParamSet;
use ctrls::policy::{rl_finetune, PolicyParams};
use ctrls::simplex::StateDistribution;
use ctrls::{exec, rng, Exec};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{eval_tasks, evaluate_cell, render_table, Agent, CtrlsAgent, OracleAgent};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PRETRAIN_CSV: &str = "pretrain_metrics.csv";
pub const RL_CSV: &str = "rl_curve.csv";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const TRANSITION_CSV: &str = "transition.csv";

#[derive(Debug, Parser)]
#[command(
    name = "ctrls",
    version,
    about = "Latent-state chain-of-thought control at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; CTRLS_<KEY> variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a training corpus from the ground-truth HMM.
    GenData,
    /// Fit the generator, latent abstraction and transition kernel.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue conditioned generator updates from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the latent policy with REINFORCE.
    Rl {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Report accuracy and success rate on the (eta, epsilon) grid.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the value-iteration policy instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Dump the transition matrix, centroid norms and policy summary.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Runs one command with `vars` as the process environment; returns the
/// text to print.
pub fn run<I>(cli: &Cli, vars: I) -> Result<String>
where
    I: IntoIterator<Item = (String, String)>,
{
    if cli.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let vars: Vec<(String, String)> = vars.into_iter().collect();
    std::fs::create_dir_all(&cli.out).map_err(CliError::io(&cli.out))?;
    let ctx = Ctx {
        cli,
        vars,
        exec: Exec::from_workers(cli.workers),
    };
    exec::with_workers(cli.workers, || match &cli.command {
        Command::GenData => ctx.gen_data(),
        Command::Pretrain { corpus, resume } => ctx.pretrain(corpus.as_deref(), resume.as_deref()),
        Command::Rl { checkpoint } => ctx.rl(checkpoint),
        Command::Eval { checkpoint, oracle } => ctx.eval(checkpoint.as_deref(), *oracle),
        Command::Inspect { checkpoint } => ctx.inspect(checkpoint),
    })
}

struct Ctx<'a> {
    cli: &'a Cli,
    vars: Vec<(String, String)>,
    exec: Exec,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Debug, Serialize)]
struct Manifest {
    corpus_schema_version: u32,
    tool_version: &'static str,
    seed: u64,
    n_sequences: usize,
    records: usize,
    segments: usize,
    config_sha256: String,
    env_sha256: String,
    corpus_file: &'static str,
    corpus_sha256: String,
}

#[derive(Debug, Serialize)]
struct RlRow {
    update: usize,
    episodes: usize,
    mean_reward: f64,
    success_rate: f64,
    entropy: f64,
    grad_norm: f64,
}

impl Ctx<'_> {
    fn with_seed(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(s) = self.cli.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.cli.config.as_deref(), self.vars.clone())?;
        self.with_seed(cfg)
    }

    /// The --config file when given, else the checkpoint's snapshot; model
    /// shapes must agree with the checkpoint either way.
    fn config_for(&self, ck: &Checkpoint) -> Result<RunConfig> {
        let cfg = match &self.cli.config {
            Some(_) => self.config()?,
            None => self.with_seed(RunConfig::load_from(&ck.config, self.vars.clone())?)?,
        };
        if cfg.model_config() != ck.config.model_config() {
            return Err(CliError::Config(
                "model settings differ from the checkpoint's configuration".into(),
            ));
        }
        Ok(cfg)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn gen_data(&self) -> Result<String> {
        let cfg = self.config()?;
        let env = ModChain::new(cfg.env_config())?;
        let records = env.generate_corpus(cfg.n_sequences, rng::derive(cfg.seed, 0xc0));
        let mut bytes = Vec::new();
        write_corpus(&mut bytes, &records)?;
        let env_json = serde_json::to_vec(&cfg.env_config()).expect("env config serializes");
        let manifest = Manifest {
            corpus_schema_version: CORPUS_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            n_sequences: cfg.n_sequences,
            records: records.len(),
            segments: records.iter().map(|r| r.segments.len()).sum(),
            config_sha256: sha256_hex(cfg.to_toml().as_bytes()),
            env_sha256: sha256_hex(&env_json),
            corpus_file: CORPUS_FILE,
            corpus_sha256: sha256_hex(&bytes),
        };
        write_file(&self.path(CORPUS_FILE), &bytes)?;
        let mut m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        m.push('\n');
        write_file(&self.path(MANIFEST_FILE), m.as_bytes())?;
        Ok(format!(
            "wrote {} records to {}\n",
            records.len(),
            self.path(CORPUS_FILE).display()
        ))
    }

    fn pretrain(&self, corpus: Option<&Path>, resume: Option<&Path>) -> Result<String> {
        let resumed = resume.map(Checkpoint::load).transpose()?;
        let cfg = match &resumed {
            Some(ck) => self.config_for(ck)?,
            None => self.config()?,
        };
        let corpus_path = corpus
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.path(CORPUS_FILE));
        let file = std::fs::File::open(&corpus_path).map_err(CliError::io(&corpus_path))?;
        let records = read_corpus(BufReader::new(file))?;
        if records.is_empty() {
            return Err(CliError::Data(format!(
                "{} has no records",
                corpus_path.display()
            )));
        }
        let env = ModChain::new(cfg.env_config())?;
        let data: Vec<TrainingSequence> = records
            .iter()
            .map(|r| TrainingSequence::from_record(r, &env.vocab))
            .collect();
        let pcfg = cfg.pretrain_config();
        let (model, epochs, state, policy) = match resumed {
            Some(ck) => {
                let mut model = ck.model()?;
                let posteriors = encode_corpus(&model.encoder, &data, self.exec)?;
                let first = ck.rng.pretrain_epochs;
                let epochs =
                    train_generator(&mut model, &data, &posteriors, &pcfg, first, self.exec)?;
                let state = RngState {
                    seed: cfg.seed,
                    pretrain_epochs: first + epochs.len(),
                    ..ck.rng
                };
                (model, epochs, state, ck.policy()?)
            }
            None => {
                let (model, report) = pretrain(&data, &cfg.model_config(), &pcfg, self.exec)?;
                let state = RngState {
                    seed: cfg.seed,
                    pretrain_epochs: report.epochs.len(),
                    ..RngState::default()
                };
                (model, report.epochs, state, None)
            }
        };
        Checkpoint::new(cfg, state, &model, policy.as_ref()).save(&self.path(CHECKPOINT_FILE))?;
        write_file(
            &self.path(PRETRAIN_CSV),
            &csv_bytes::<EpochMetrics>(&epochs)?,
        )?;
        let mut out = String::new();
        for e in &epochs {
            writeln!(
                out,
                "epoch {:>3}  recon {:.4}  kl {:.4}  elbo {:.4}",
                e.epoch, e.recon, e.kl, e.elbo
            )
            .unwrap();
        }
        writeln!(out, "checkpoint: {}", self.path(CHECKPOINT_FILE).display()).unwrap();
        Ok(out)
    }

    fn rl(&self, checkpoint: &Path) -> Result<String> {
        let ck = Checkpoint::load(checkpoint)?;
        let cfg = self.config_for(&ck)?;
        let model = ck.model()?;
        let env = ModChain::new(cfg.task_env_config())?;
        let mut rl_cfg = cfg.rl_config();
        let mut policy = match ck.policy()? {
            Some(p) => p,
            None => rl_cfg.init_policy(&model.transition)?,
        };
        let tasks: Vec<_> = (0..cfg.n_tasks)
            .map(|i| env.generate_task(rng::derive_path(cfg.seed, &[0x7a5c, i as u64])))
            .collect();
        rl_cfg.seed = rng::derive_path(cfg.seed, &[0x71, ck.rng.rl_updates as u64]);
        let curve = rl_finetune(&env, &model, &mut policy, &tasks, &rl_cfg, self.exec)?;
        if !policy.is_finite() {
            return Err(CliError::Numeric(
                "policy parameters became non-finite".into(),
            ));
        }
        let prior = ck.rng.rl_episodes;
        let rows: Vec<RlRow> = curve
            .iter()
            .map(|c| RlRow {
                update: ck.rng.rl_updates + c.episode,
                episodes: prior + ((c.episode + 1) * rl_cfg.batch_size).min(rl_cfg.episodes),
                mean_reward: c.mean_reward,
                success_rate: c.success_rate,
                entropy: c.entropy,
                grad_norm: c.grad_norm,
            })
            .collect();
        let seen = prior + rl_cfg.episodes;
        let state = RngState {
            seed: cfg.seed,
            rl_episodes: seen,
            rl_updates: ck.rng.rl_updates + curve.len(),
            ..ck.rng
        };
        Checkpoint::new(cfg, state, &model, Some(&policy)).save(&self.path(CHECKPOINT_FILE))?;
        write_file(&self.path(RL_CSV), &csv_bytes(&rows)?)?;
        let tail = &rows[rows.len().saturating_sub(10)..];
        let recent = tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len().max(1) as f64;
        Ok(format!(
            "{} updates, {} episodes; mean reward over the last {} updates {:.4}\n",
            rows.len(),
            seen,
            tail.len(),
            recent
        ))
    }

    fn eval(&self, checkpoint: Option<&Path>, oracle: bool) -> Result<String> {
        let (cfg, loaded) = match checkpoint {
            Some(p) => {
                let ck = Checkpoint::load(p)?;
                (self.config_for(&ck)?, Some(ck))
            }
            None if oracle => (self.config()?, None),
            None => {
                return Err(CliError::Config(
                    "eval needs --checkpoint or --oracle".into(),
                ));
            }
        };
        let env = ModChain::new(cfg.task_env_config())?;
        let tasks = eval_tasks(&env, cfg.eval_queries, cfg.seed);
        let held;
        let agent: Box<dyn Agent + '_> = if oracle {
            Box::new(OracleAgent::new(ChainMdp::from(&env.config), &tasks)?)
        } else {
            let ck = loaded.expect("checkpoint loaded");
            let model = ck.model()?;
            let policy = match ck.policy()? {
                Some(p) => p,
                None => cfg.rl_config().init_policy(&model.transition)?,
            };
            held = (model, policy);
            Box::new(CtrlsAgent {
                env: &env,
                model: &held.0,
                policy: &held.1,
            })
        };
        let mut cells = Vec::new();
        for (i, &eta) in cfg.eval_etas.iter().enumerate() {
            for (j, &eps) in cfg.eval_epsilons.iter().enumerate() {
                let seed = rng::derive_path(cfg.seed, &[0xce11, i as u64, j as u64]);
                cells.push(evaluate_cell(
                    agent.as_ref(),
                    &tasks,
                    &cfg.exploration(eta, eps),
                    seed,
                    self.exec,
                )?);
            }
        }
        write_file(&self.path(EVAL_CSV), &csv_bytes(&cells)?)?;
        Ok(render_table(&cells))
    }

    fn inspect(&self, checkpoint: &Path) -> Result<String> {
        let ck = Checkpoint::load(checkpoint)?;
        let model = ck.model()?;
        let p = model.transition.probs();
        let k = p.nrows();
        let mut csv = String::from("state");
        for j in 0..k {
            write!(csv, ",p{j}").unwrap();
        }
        csv.push_str(",row_sum\n");
        let mut out = String::from("transition matrix\n");
        for i in 0..k {
            let row = model.transition.row(i);
            let sum: f64 = row.iter().sum();
            write!(csv, "{i}").unwrap();
            write!(out, "{i:>3} ").unwrap();
            for v in row {
                write!(csv, ",{v}").unwrap();
                write!(out, " {v:.4}").unwrap();
            }
            writeln!(csv, ",{sum:.6}").unwrap();
            writeln!(out, "  | {sum:.6}").unwrap();
        }
        write_file(&self.path(TRANSITION_CSV), csv.as_bytes())?;
        out.push_str("centroid norms\n");
        for j in 0..model.encoder.centroids.k() {
            let n = model
                .encoder
                .centroids
                .row(j)
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            writeln!(out, "{j:>3}  {n:.6}").unwrap();
        }
        out.push_str(&policy_summary(ck.policy()?.as_ref(), k)?);
        Ok(out)
    }
}

fn policy_summary(policy: Option<&PolicyParams>, k: usize) -> Result<String> {
    let Some(p) = policy else {
        return Ok("policy: none (not fine-tuned)\n".into());
    };
    let mut out = String::from("policy concentration at each vertex\n");
    for i in 0..k {
        let c = p.forward(&StateDistribution::one_hot(k, i))?;
        let c = c.as_slice();
        let total: f64 = c.iter().sum();
        let (arg, top) = c
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        writeln!(
            out,
            "{i:>3}  total {total:.4}  mode {arg} ({:.4})",
            top / total
        )
        .unwrap();
    }
    Ok(out)
}
