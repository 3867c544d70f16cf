//! Gumbel dynamical models.
//!
//! A switching dynamical system whose discrete states are relaxed onto the
//! probability simplex with Gumbel-Softmax noise. The relaxation makes the
//! whole model differentiable, so it is fitted end to end by reparameterized
//! variational inference with an amortized posterior network.
//!
//! Module map:
//! - [`diffmath`]: matrices, reverse-mode tape, adaptive-moment optimizer
//! - [`gumbel`]: Gumbel noise, Gumbel-Max and relaxed categorical sampling/density
//! - [`model`]: the two-level generative model and its transition families
//! - [`mixture3`]: the three-level mixture form, parameter conversions and
//!   the block-tridiagonal Gaussian posterior
//! - [`inference`]: amortized posteriors, the ELBO and training
//! - [`evalpred`]: smoothing, k-step prediction envelopes and metrics
//! - [`datagen`]: NASCAR generator and CSV ingestion
//! - [`checkpoint`]: versioned parameter documents

pub mod checkpoint;
pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod evalpred;
pub mod gumbel;
pub mod inference;
pub mod mixture3;
pub mod model;
pub mod rng;

pub use diffmath::{Matrix, Tape, Var};
pub use error::{GdmError, Result};
