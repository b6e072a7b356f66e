use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::corpus::CorpusRecord;
use super::hmm::{GroundTruthHMM, SegmentLengths};
use crate::error::{CoreError, Result};
use crate::rng::{self, Rng};

/// Reserved segment terminator token.
pub const TERMINATOR: u32 = 0;

/// One arithmetic step of a chain; everything is reduced mod the modulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add(u32),
    Mul(u32),
}

impl Op {
    pub fn apply(self, value: u32, modulus: u32) -> u32 {
        let (v, m) = (value as u64, modulus as u64);
        match self {
            Op::Add(k) => ((v + k as u64) % m) as u32,
            Op::Mul(k) => ((v * k as u64) % m) as u32,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Add(k) => write!(f, "+{k}"),
            Op::Mul(k) => write!(f, "*{k}"),
        }
    }
}

impl FromStr for Op {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Op> {
        let s = s.trim();
        let bad = || CoreError::InvalidConfig(format!("unrecognized op `{s}` (expected +k or *k)"));
        let (head, tail) = s.split_at(s.char_indices().nth(1).map(|(i, _)| i).ok_or_else(bad)?);
        let k: u32 = tail.parse().map_err(|_| bad())?;
        match head {
            "+" => Ok(Op::Add(k)),
            "*" => Ok(Op::Mul(k)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Op {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Op {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Op, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Applies a chain of ops to `start`, all mod `modulus`.
pub fn apply_chain(start: u32, ops: &[Op], modulus: u32) -> u32 {
    ops.iter()
        .fold(start % modulus, |v, op| op.apply(v, modulus))
}

/// Applies a chain where each step independently slips to a uniformly
/// random op with probability `slip`.
pub fn execute_chain(
    start: u32,
    chain: &[Op],
    all_ops: &[Op],
    modulus: u32,
    slip: f64,
    rng: &mut Rng,
) -> u32 {
    chain.iter().fold(start % modulus, |v, op| {
        let op = if slip > 0.0 && rng.random::<f64>() < slip {
            all_ops[rng.random_range(0..all_ops.len())]
        } else {
            *op
        };
        op.apply(v, modulus)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub start_value: u32,
    pub modulus: u32,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answer {
    pub value: u32,
}

/// A generated reasoning segment. `tokens` ends with [`TERMINATOR`] unless
/// generation hit the length cap, in which case `truncated` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_label: Option<usize>,
    #[serde(default)]
    pub truncated: bool,
}

impl Segment {
    pub fn terminated(mut content: Vec<u32>, op_label: Option<usize>) -> Segment {
        content.push(TERMINATOR);
        Segment {
            tokens: content,
            op_label,
            truncated: false,
        }
    }

    /// Tokens without the trailing terminator.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&TERMINATOR) if !self.truncated => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedAnswer {
    Value(Answer),
    ParseFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reward {
    pub value: u8,
    pub parse_failure: bool,
}

/// Binary terminal reward: 1 iff the parsed answer equals the gold answer.
pub fn reward(answer: &ParsedAnswer, gold: &Answer) -> Reward {
    match answer {
        ParsedAnswer::Value(a) => Reward {
            value: u8::from(a == gold),
            parse_failure: false,
        },
        ParsedAnswer::ParseFailure => Reward {
            value: 0,
            parse_failure: true,
        },
    }
}

/// Token layout: 0 is the terminator, then `tokens_per_op` tokens per op,
/// then filler tokens, and the last id marks a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub n_ops: usize,
    pub tokens_per_op: usize,
}

impl Vocab {
    pub fn new(size: usize, n_ops: usize, tokens_per_op: usize) -> Result<Vocab> {
        if n_ops == 0 || tokens_per_op == 0 {
            return Err(CoreError::InvalidConfig(
                "need at least one op and one token per op".into(),
            ));
        }
        if size < n_ops * tokens_per_op + 2 {
            return Err(CoreError::InvalidConfig(format!(
                "vocab_size {size} too small for {n_ops} ops x {tokens_per_op} tokens plus terminator and query marker"
            )));
        }
        Ok(Vocab {
            size,
            n_ops,
            tokens_per_op,
        })
    }

    pub fn op_tokens(&self, op: usize) -> std::ops::Range<u32> {
        let lo = 1 + (op * self.tokens_per_op) as u32;
        lo..lo + self.tokens_per_op as u32
    }

    pub fn filler_tokens(&self) -> std::ops::Range<u32> {
        (1 + (self.n_ops * self.tokens_per_op) as u32)..self.query_marker()
    }

    pub fn query_marker(&self) -> u32 {
        (self.size - 1) as u32
    }

    pub fn op_of(&self, token: u32) -> Option<usize> {
        if token == TERMINATOR {
            return None;
        }
        let idx = (token - 1) as usize / self.tokens_per_op;
        (idx < self.n_ops).then_some(idx)
    }

    pub fn query_tokens(&self) -> Vec<u32> {
        vec![self.query_marker()]
    }
}

/// Reads the op a segment expresses: the majority op among its op tokens,
/// ties going to the op whose token appears first. Truncated segments and
/// segments without op tokens do not parse.
pub fn parse_segment(segment: &Segment, vocab: &Vocab) -> Option<usize> {
    if segment.truncated || segment.tokens.last() != Some(&TERMINATOR) {
        return None;
    }
    let mut counts = vec![0usize; vocab.n_ops];
    let mut first_seen = vec![usize::MAX; vocab.n_ops];
    for (pos, &tok) in segment.content().iter().enumerate() {
        if let Some(op) = vocab.op_of(tok) {
            counts[op] += 1;
            first_seen[op] = first_seen[op].min(pos);
        }
    }
    (0..vocab.n_ops)
        .filter(|&op| counts[op] > 0)
        .max_by(|&a, &b| {
            counts[a]
                .cmp(&counts[b])
                .then(first_seen[b].cmp(&first_seen[a]))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub modulus: u32,
    pub horizon: usize,
    pub ops: Vec<Op>,
    pub vocab_size: usize,
    pub tokens_per_op: usize,
    pub seg_len_min: usize,
    pub seg_len_max: usize,
    pub max_segment_len: usize,
    /// Emission mass an op state puts on its own tokens.
    pub emission_purity: f64,
    pub min_emission_tv: f64,
    /// Mass each kernel row puts on the cyclic successor op.
    pub successor_bias: f64,
    pub slip: f64,
    pub hmm_seed: u64,
    /// Fixed op chain shared by every task (indices into `ops`).
    pub program: Option<Vec<usize>>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            modulus: 7,
            horizon: 4,
            ops: vec![Op::Add(1), Op::Add(2), Op::Mul(2), Op::Mul(3)],
            vocab_size: 16,
            tokens_per_op: 3,
            seg_len_min: 2,
            seg_len_max: 4,
            max_segment_len: 8,
            emission_purity: 0.85,
            min_emission_tv: 0.5,
            successor_bias: 0.5,
            slip: 0.0,
            hmm_seed: 0,
            program: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.modulus < 2 {
            return bad(format!("modulus must be >= 2, got {}", self.modulus));
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if self.ops.is_empty() {
            return bad("at least one op is required".into());
        }
        Vocab::new(self.vocab_size, self.ops.len(), self.tokens_per_op)?;
        if self.seg_len_min < 1 || self.seg_len_min > self.seg_len_max {
            return bad(format!(
                "segment lengths need 1 <= seg_len_min <= seg_len_max, got {}..={}",
                self.seg_len_min, self.seg_len_max
            ));
        }
        if self.max_segment_len <= self.seg_len_max {
            return bad("max_segment_len must exceed seg_len_max (room for the terminator)".into());
        }
        if !(0.0..=1.0).contains(&self.emission_purity)
            || !(0.0..=1.0).contains(&self.min_emission_tv)
        {
            return bad("emission_purity and min_emission_tv must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.successor_bias) {
            return bad("successor_bias must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return bad(format!("slip must lie in [0, 1], got {}", self.slip));
        }
        if let Some(program) = &self.program {
            if program.len() != self.horizon {
                return bad(format!(
                    "program has {} ops but horizon is {}",
                    program.len(),
                    self.horizon
                ));
            }
            if let Some(op) = program.iter().find(|&&op| op >= self.ops.len()) {
                return bad(format!(
                    "program references op {op} but only {} ops exist",
                    self.ops.len()
                ));
            }
        }
        Ok(())
    }

    pub fn segment_lengths(&self) -> SegmentLengths {
        SegmentLengths {
            min: self.seg_len_min,
            max: self.seg_len_max,
        }
    }
}

/// A generated problem: the query, its hidden op chain and the gold answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub query: Query,
    pub chain: Vec<usize>,
    pub answer: Answer,
}

/// The environment: config, token layout and the ground-truth HMM whose
/// states are the ops.
#[derive(Debug, Clone)]
pub struct ModChain {
    pub config: EnvConfig,
    pub vocab: Vocab,
    pub hmm: GroundTruthHMM,
}

impl ModChain {
    pub fn new(config: EnvConfig) -> Result<ModChain> {
        config.validate()?;
        let vocab = Vocab::new(config.vocab_size, config.ops.len(), config.tokens_per_op)?;
        let hmm = GroundTruthHMM::for_vocab(
            &vocab,
            config.emission_purity,
            config.successor_bias,
            config.hmm_seed,
        )?;
        let tv = hmm.min_emission_tv();
        if tv + 1e-12 < config.min_emission_tv {
            return Err(CoreError::InvalidConfig(format!(
                "emission rows are only {tv:.3} apart in total variation (min_emission_tv = {})",
                config.min_emission_tv
            )));
        }
        Ok(ModChain { config, vocab, hmm })
    }

    /// Deterministic in `seed`.
    pub fn generate_task(&self, seed: u64) -> Task {
        let mut rng = rng::rng(seed);
        let c = &self.config;
        let start_value = rng.random_range(0..c.modulus);
        let chain = match &c.program {
            Some(p) => p.clone(),
            None => self.hmm.sample_states(c.horizon, &mut rng),
        };
        let ops: Vec<Op> = chain.iter().map(|&i| c.ops[i]).collect();
        Task {
            query: Query {
                id: seed,
                start_value,
                modulus: c.modulus,
                horizon: c.horizon,
            },
            answer: Answer {
                value: apply_chain(start_value, &ops, c.modulus),
            },
            chain,
        }
    }

    /// Segment expressing `op`, drawn from the op state's emission row.
    pub fn emit_segment(&self, op: usize, rng: &mut Rng) -> Segment {
        self.hmm
            .emit_segment(op, self.config.segment_lengths(), rng)
    }

    /// A task with one segment per chain op; deterministic in `seed`.
    pub fn sample_record(&self, seed: u64) -> CorpusRecord {
        let task = self.generate_task(seed);
        let mut rng = rng::rng(rng::derive(seed, 0x5e9));
        let segments: Vec<Segment> = task
            .chain
            .iter()
            .map(|&op| self.emit_segment(op, &mut rng))
            .collect();
        CorpusRecord::new(task.query, &segments, task.chain, task.answer)
    }

    /// Records for seeds derived from `seed`, one per index.
    pub fn generate_corpus(&self, n: usize, seed: u64) -> Vec<CorpusRecord> {
        (0..n as u64)
            .map(|i| self.sample_record(rng::derive(seed, i)))
            .collect()
    }

    /// Parses every segment and executes the resulting chain (with slip).
    pub fn answer_from_segments(
        &self,
        query: &Query,
        segments: &[Segment],
        rng: &mut Rng,
    ) -> ParsedAnswer {
        let parsed: Option<Vec<Op>> = segments
            .iter()
            .map(|s| parse_segment(s, &self.vocab).map(|i| self.config.ops[i]))
            .collect();
        match parsed {
            Some(ops) if !ops.is_empty() => ParsedAnswer::Value(Answer {
                value: execute_chain(
                    query.start_value,
                    &ops,
                    &self.config.ops,
                    query.modulus,
                    self.config.slip,
                    rng,
                ),
            }),
            _ => ParsedAnswer::ParseFailure,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_arithmetic() {
        assert_eq!(apply_chain(3, &[Op::Add(2), Op::Mul(2)], 7), 3);
        assert_eq!(apply_chain(0, &[], 5), 0);
    }

    #[test]
    fn op_text_round_trip() {
        for op in [Op::Add(2), Op::Mul(13)] {
            assert_eq!(op.to_string().parse::<Op>().unwrap(), op);
        }
        assert!("-1".parse::<Op>().is_err());
        assert!("+".parse::<Op>().is_err());
    }

    #[test]
    fn invalid_modulus_rejected() {
        let cfg = EnvConfig {
            modulus: 1,
            ..EnvConfig::default()
        };
        assert!(matches!(
            ModChain::new(cfg),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    #[test]
    fn tasks_are_deterministic_and_consistent() {
        let env = ModChain::new(EnvConfig::default()).unwrap();
        let a = env.generate_task(11);
        assert_eq!(a, env.generate_task(11));
        let ops: Vec<Op> = a.chain.iter().map(|&i| env.config.ops[i]).collect();
        assert_eq!(a.answer.value, apply_chain(a.query.start_value, &ops, 7));
        assert!(a.query.start_value < 7);
        assert_eq!(a.chain.len(), 4);
    }

    #[test]
    fn reward_cases() {
        let gold = Answer { value: 3 };
        let r = reward(&ParsedAnswer::Value(Answer { value: 3 }), &gold);
        assert_eq!((r.value, r.parse_failure), (1, false));
        let r = reward(&ParsedAnswer::Value(Answer { value: 2 }), &gold);
        assert_eq!((r.value, r.parse_failure), (0, false));
        let r = reward(&ParsedAnswer::ParseFailure, &gold);
        assert_eq!((r.value, r.parse_failure), (0, true));
    }

    #[test]
    fn segment_parsing() {
        let v = Vocab::new(16, 4, 3).unwrap();
        assert_eq!(v.filler_tokens(), 13..15);
        assert_eq!(v.query_marker(), 15);
        // op 1 owns tokens 4..7
        assert_eq!(
            parse_segment(&Segment::terminated(vec![4, 13, 5], None), &v),
            Some(1)
        );
        // tie: op 2 token first
        assert_eq!(
            parse_segment(&Segment::terminated(vec![8, 1], None), &v),
            Some(2)
        );
        // filler only
        assert_eq!(
            parse_segment(&Segment::terminated(vec![13, 14], None), &v),
            None
        );
        let truncated = Segment {
            tokens: vec![4, 4, 4],
            op_label: None,
            truncated: true,
        };
        assert_eq!(parse_segment(&truncated, &v), None);
    }

    #[test]
    fn unparseable_segment_is_a_parse_failure() {
        let env = ModChain::new(EnvConfig::default()).unwrap();
        let task = env.generate_task(3);
        let mut rng = rng::rng(0);
        let segs = vec![Segment::terminated(vec![13], None)];
        assert_eq!(
            env.answer_from_segments(&task.query, &segs, &mut rng),
            ParsedAnswer::ParseFailure
        );
    }
}
