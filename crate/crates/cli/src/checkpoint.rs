//! JSON checkpoint: named numeric blocks stored as base64 little-endian
//! f64 with explicit shapes. Blocks live in a sorted map, so writing the
//! same model twice yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use ctrls::abstraction::{Centroids, Encoder};
use ctrls::backbone::{BackboneParams, ConditionerParams};
use ctrls::elbo::CtrlsModel;
use ctrls::policy::PolicyParams;
use ctrls::transition::TransitionMatrix;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub shape: Vec<usize>,
    /// Little-endian f64, base64.
    pub data: String,
}

impl Block {
    pub fn encode(shape: Vec<usize>, values: &[f64]) -> Block {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Block {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self, name: &str) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| CliError::Data(format!("block {name}: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(CliError::Data(format!(
                "block {name}: {} bytes for shape {:?}",
                bytes.len(),
                self.shape
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Progress counters; every random stream is derived from `seed` and these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub rl_episodes: usize,
    pub rl_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: RunConfig,
    pub rng: RngState,
    pub blocks: BTreeMap<String, Block>,
}

fn put1(blocks: &mut BTreeMap<String, Block>, name: String, a: &Array1<f64>) {
    blocks.insert(
        name,
        Block::encode(vec![a.len()], a.as_slice().expect("contiguous")),
    );
}

fn put2(blocks: &mut BTreeMap<String, Block>, name: String, a: &Array2<f64>) {
    let std = a.as_standard_layout();
    blocks.insert(
        name,
        Block::encode(
            vec![a.nrows(), a.ncols()],
            std.as_slice().expect("contiguous"),
        ),
    );
}

fn put_backbone(blocks: &mut BTreeMap<String, Block>, prefix: &str, b: &BackboneParams) {
    put2(blocks, format!("{prefix}.embed"), &b.embed);
    put1(blocks, format!("{prefix}.pos_weights"), &b.pos_weights);
    put2(blocks, format!("{prefix}.hidden_w"), &b.hidden_w);
    put1(blocks, format!("{prefix}.hidden_b"), &b.hidden_b);
    put2(blocks, format!("{prefix}.out_w"), &b.out_w);
    put1(blocks, format!("{prefix}.out_b"), &b.out_b);
}

impl Checkpoint {
    pub fn new(
        config: RunConfig,
        rng: RngState,
        model: &CtrlsModel,
        policy: Option<&PolicyParams>,
    ) -> Checkpoint {
        let mut b = BTreeMap::new();
        put_backbone(&mut b, "generator", &model.generator);
        put_backbone(&mut b, "encoder.backbone", &model.encoder.backbone);
        let c = &model.conditioner;
        put2(&mut b, "conditioner.down_w".into(), &c.down_w);
        put1(&mut b, "conditioner.down_b".into(), &c.down_b);
        put2(&mut b, "conditioner.up_w".into(), &c.up_w);
        put1(&mut b, "conditioner.up_b".into(), &c.up_b);
        put2(
            &mut b,
            "encoder.centroids".into(),
            model.encoder.centroids.matrix(),
        );
        b.insert(
            "encoder.beta".into(),
            Block::encode(vec![], &[model.encoder.beta]),
        );
        put2(
            &mut b,
            "transition.logits".into(),
            model.transition.logits(),
        );
        b.insert(
            "transition.init_logits".into(),
            Block::encode(vec![model.init_logits.len()], &model.init_logits),
        );
        if let Some(p) = policy {
            put2(&mut b, "policy.weights".into(), &p.weights);
            put1(&mut b, "policy.bias".into(), &p.bias);
            b.insert("policy.tau".into(), Block::encode(vec![], &[p.tau]));
        }
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config,
            rng,
            blocks: b,
        }
    }

    fn values(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let block = self
            .blocks
            .get(name)
            .ok_or_else(|| CliError::Data(format!("checkpoint is missing block {name}")))?;
        if block.shape != shape {
            return Err(CliError::Data(format!(
                "block {name} has shape {:?}, config implies {shape:?}",
                block.shape
            )));
        }
        block.decode(name)
    }

    fn arr1(&self, name: &str, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.values(name, &[n])?))
    }

    fn arr2(&self, name: &str, r: usize, c: usize) -> Result<Array2<f64>> {
        Array2::from_shape_vec((r, c), self.values(name, &[r, c])?)
            .map_err(|e| CliError::Data(format!("block {name}: {e}")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.values(name, &[])?[0])
    }

    fn backbone(&self, prefix: &str) -> Result<BackboneParams> {
        let cfg = &self.config;
        let (v, d, w) = (cfg.vocab_size, cfg.dim, cfg.window);
        Ok(BackboneParams {
            window: w,
            embed: self.arr2(&format!("{prefix}.embed"), v, d)?,
            pos_weights: self.arr1(&format!("{prefix}.pos_weights"), w)?,
            hidden_w: self.arr2(&format!("{prefix}.hidden_w"), d, d)?,
            hidden_b: self.arr1(&format!("{prefix}.hidden_b"), d)?,
            out_w: self.arr2(&format!("{prefix}.out_w"), v, d)?,
            out_b: self.arr1(&format!("{prefix}.out_b"), v)?,
        })
    }

    /// Rebuilds the model, checking every block against the config snapshot.
    pub fn model(&self) -> Result<CtrlsModel> {
        let cfg = &self.config;
        let (d, r, k) = (cfg.dim, cfg.rank, cfg.n_states);
        let latent = cfg.model_config().latent_dim();
        let data = |e: ctrls::CoreError| CliError::Data(format!("checkpoint: {e}"));
        let conditioner = ConditionerParams {
            down_w: self.arr2("conditioner.down_w", r, d)?,
            down_b: self.arr1("conditioner.down_b", r)?,
            up_w: self.arr2("conditioner.up_w", d, r + latent)?,
            up_b: self.arr1("conditioner.up_b", d)?,
        };
        let encoder = Encoder {
            backbone: self.backbone("encoder.backbone")?,
            k: cfg.spectral_k,
            centroids: Centroids::new(self.arr2("encoder.centroids", k, latent)?).map_err(data)?,
            beta: self.scalar("encoder.beta")?,
        };
        Ok(CtrlsModel {
            generator: self.backbone("generator")?,
            conditioner,
            encoder,
            transition: TransitionMatrix::from_logits(self.arr2("transition.logits", k, k)?)
                .map_err(data)?,
            init_logits: self.values("transition.init_logits", &[k])?,
        })
    }

    /// Fine-tuned policy, when the checkpoint has one.
    pub fn policy(&self) -> Result<Option<PolicyParams>> {
        if !self.blocks.contains_key("policy.weights") {
            return Ok(None);
        }
        let k = self.config.n_states;
        Ok(Some(PolicyParams {
            weights: self.arr2("policy.weights", k, k)?,
            bias: self.arr1("policy.bias", k)?,
            tau: self.scalar("policy.tau")?,
        }))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version =
            serde_json::from_str(text).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
        if v.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CliError::Data(format!(
                "checkpoint schema_version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                v.schema_version
            )));
        }
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
        ck.config.validate()?;
        ck.model()?;
        ck.policy()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_round_trip_is_bit_exact() {
        let v = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5];
        let b = Block::encode(vec![5], &v);
        let back = b.decode("x").unwrap();
        for (a, c) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    proptest::proptest! {
        #[test]
        fn any_block_round_trips(v in proptest::collection::vec(proptest::num::f64::ANY, 0..64)) {
            let back = Block::encode(vec![v.len()], &v).decode("x").unwrap();
            proptest::prop_assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn truncated_block_is_a_data_error() {
        let mut b = Block::encode(vec![2], &[1.0, 2.0]);
        b.shape = vec![3];
        assert_eq!(b.decode("x").unwrap_err().exit_code(), 3);
    }
}
