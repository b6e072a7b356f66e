//! Dirichlet policy over the latent simplex, epsilon-uniform exploration,
//! entropy-regularized REINFORCE, and on-policy fine-tuning.

mod dirichlet;
mod params;
mod rl;

pub use dirichlet::{
    dirichlet_log_density, dirichlet_score, policy_entropy, policy_entropy_grad, DirichletParams,
    EntropyKind, CONCENTRATION_FLOOR,
};
pub use params::{sample_action, softplus, softplus_inv, Branch, PolicyParams};
pub use rl::{
    leave_one_out, policy_gradient, reinforce_update, rl_finetune, rl_finetune_with, rollout,
    surrogate_objective, vertex_entropy, CurveRow, ExplorationConfig, PolicyGradient, RewardFn,
    RlConfig, Step, Trajectory,
};
