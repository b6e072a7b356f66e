//! Synthetic chain-of-thought environment: modular-arithmetic operation
//! chains whose reasoning segments are emitted by a ground-truth HMM, plus
//! the exact oracles (forward-backward, value iteration) used to check the
//! learned components.

mod corpus;
mod hmm;
mod modchain;
mod value_iteration;

pub use corpus::{read_corpus, write_corpus, CorpusRecord, CORPUS_SCHEMA_VERSION};
pub use hmm::{
    exact_posterior, forward_backward, sample_hmm_corpus, GroundTruthHMM, HmmSequence,
    SegmentLengths, Smoothing,
};
pub use modchain::{
    apply_chain, execute_chain, parse_segment, reward, Answer, EnvConfig, ModChain, Op,
    ParsedAnswer, Query, Reward, Segment, Task, Vocab, TERMINATOR,
};
pub use value_iteration::{value_iteration_optimum, ChainMdp, ValueIteration};
