//! Sequential evidence lower bound over latent reasoning states and the
//! staged offline pretraining loop that maximizes it.

mod bound;
mod pretrain;

pub use bound::{
    compute_elbo, exact_log_likelihood, markov_elbo, relaxed_elbo_grad, ElboBreakdown, ElboGrad,
    ElboMode, HardLatentModel, LatentModelRef, MarkovPosterior, MAX_PATHS,
};
pub use pretrain::{
    encode_corpus, evaluate_elbo, pretrain, train_generator, CtrlsModel, EpochMetrics, ModelConfig,
    PretrainConfig, PretrainReport, TrainScope, TrainingSequence,
};
