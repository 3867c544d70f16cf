//! Amortized variational posteriors, the reparameterized ELBO and training.

mod elbo;
mod posterior;
mod train;

pub use elbo::{elbo_estimate, elbo_vars, ElboEstimate, ElboVars};
pub use posterior::{
    amortized_apply, posterior_mean_states, posterior_sample, PosteriorDraw, PosteriorFamily, PosteriorParams,
    TrackedPosterior, DEFAULT_POSTERIOR_HIDDEN, DEFAULT_POSTERIOR_WIDTH,
};
pub use train::{
    loss_and_gradient, step_rng, train, train_from, write_trace, ModelSpec, TrainConfig, TrainFailure, TrainState,
    TraceRow,
};
