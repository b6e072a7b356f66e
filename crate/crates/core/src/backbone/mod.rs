//! Toy autoregressive segment generator and its state-conditioning adapter.
//!
//! The generator scores the next token from a fixed window of preceding
//! tokens: position-weighted token embeddings pass through one logistic
//! hidden layer (the pre-logit representation `h`), a residual bottleneck
//! adapter injects the latent vector `z`, and a linear head produces
//! logits.

mod grad;
mod model;

pub use grad::{pretrain_lm, step_log_likelihood_grad, LmConfig, StepGrad};
pub use model::{
    condition, generate_segment, next_token_distribution, step_log_likelihood, BackboneParams,
    ConditionerParams, LatentVector, Temperature, TokenEmbeddingMatrix,
};

/// Token stream seen by the generator: the query tokens followed by every
/// history segment (terminators included).
pub fn context_stream(query_tokens: &[u32], history: &[crate::env::Segment]) -> Vec<u32> {
    let mut s = query_tokens.to_vec();
    for seg in history {
        s.extend_from_slice(&seg.tokens);
    }
    s
}
