//! Latent-state control of chain-of-thought generation at desk scale.
//!
//! A toy autoregressive segment generator stands in for the language model;
//! reasoning steps are abstracted into soft latent states by spectral
//! embedding and k-means, a transition kernel over those states is fit by
//! minimizing an evidence lower bound, and a Dirichlet policy over the
//! latent simplex is fine-tuned on-policy with REINFORCE.

// `!(x > 0.0)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod backbone;
pub mod elbo;
pub mod env;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod params;
pub mod policy;
pub mod rng;
pub mod simplex;
pub mod special;
pub mod transition;

pub use error::{CoreError, Result};
pub use exec::Exec;
pub use simplex::StateDistribution;
