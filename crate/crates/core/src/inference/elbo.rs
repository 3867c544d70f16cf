//! Reparameterized evidence lower bound.

use rand::Rng;

use super::posterior::{PosteriorParams, TrackedPosterior};
use crate::diffmath::{Matrix, Tape, Var};
use crate::error::{GdmError, Result};
use crate::gumbel::sample_gumbel;
use crate::model::{GdmParams, ObsSeries, TrackedGdm};

/// Sample averages of the ELBO's parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    /// `sum_t log p(y_t | y_{t-1}, z_t)`.
    pub observation: f64,
    /// `log p(z_1) + sum_t log p(z_t | z_{t-1}, y_{t-1})`.
    pub states: f64,
    /// `log q(z_{1:T})`.
    pub log_q: f64,
    pub samples: usize,
}

impl ElboEstimate {
    pub fn elbo(&self) -> f64 {
        self.observation + self.states - self.log_q
    }

    /// Names the first non-finite part.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("observation log-likelihood", self.observation),
            ("state prior log-density", self.states),
            ("posterior log-density", self.log_q),
        ] {
            if !v.is_finite() {
                return Err(GdmError::NonFinite(format!("ELBO term '{name}' = {v}")));
            }
        }
        Ok(())
    }
}

/// ELBO parts on the tape, averaged over the supplied noise draws.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars<'t> {
    pub observation: Var<'t>,
    pub states: Var<'t>,
    pub log_q: Var<'t>,
}

impl<'t> ElboVars<'t> {
    pub fn elbo(&self) -> Result<Var<'t>> {
        self.observation.add(self.states)?.sub(self.log_q)
    }

    pub fn values(&self, samples: usize) -> ElboEstimate {
        ElboEstimate {
            observation: self.observation.item(),
            states: self.states.item(),
            log_q: self.log_q.item(),
            samples,
        }
    }
}

/// One term per element of `gumbels` (each `T x K`), averaged.
pub fn elbo_vars<'t>(
    model: &TrackedGdm<'t>,
    post: &TrackedPosterior<'t>,
    y: Var<'t>,
    gumbels: &[Matrix],
) -> Result<ElboVars<'t>> {
    if gumbels.is_empty() {
        return Err(GdmError::InvalidArgument("the ELBO needs at least one sample".into()));
    }
    let mut obs = Vec::with_capacity(gumbels.len());
    let mut states = Vec::with_capacity(gumbels.len());
    let mut log_q = Vec::with_capacity(gumbels.len());
    for g in gumbels {
        let draw = post.sample(y, g)?;
        let joint = model.log_joint_relaxed(draw.z, draw.log_z, y)?;
        obs.push(joint.observation);
        states.push(joint.states);
        log_q.push(draw.log_q);
    }
    let tape = y.tape();
    let s = 1.0 / gumbels.len() as f64;
    let avg = |v: &[Var<'t>]| -> Result<Var<'t>> { Ok(tape.vstack(v)?.sum().scale(s)) };
    Ok(ElboVars {
        observation: avg(&obs)?,
        states: avg(&states)?,
        log_q: avg(&log_q)?,
    })
}

pub(crate) fn check_pair(model: &GdmParams, post: &PosteriorParams, y: &ObsSeries) -> Result<()> {
    model.validate()?;
    post.validate()?;
    if post.variant() != model.transition.variant() {
        return Err(GdmError::InvalidArgument(format!(
            "posterior family does not match the {} transition model",
            model.transition.variant()
        )));
    }
    if post.k() != model.k() || post.n() != model.n() {
        return Err(GdmError::Dimension(format!(
            "posterior is K={}, N={} but the model is K={}, N={}",
            post.k(),
            post.n(),
            model.k(),
            model.n()
        )));
    }
    if y.dim() != model.n() || y.is_empty() {
        return Err(GdmError::Dimension(format!(
            "series is {}x{}, model expects N={}",
            y.len(),
            y.dim(),
            model.n()
        )));
    }
    Ok(())
}

/// Monte Carlo ELBO with `samples` fresh relaxed draws.
pub fn elbo_estimate<R: Rng + ?Sized>(
    model: &GdmParams,
    post: &PosteriorParams,
    y: &ObsSeries,
    rng: &mut R,
    samples: usize,
) -> Result<ElboEstimate> {
    check_pair(model, post, y)?;
    if samples == 0 {
        return Err(GdmError::InvalidArgument("the ELBO needs at least one sample".into()));
    }
    let gumbels: Vec<Matrix> = (0..samples).map(|_| sample_gumbel(rng, y.len(), model.k())).collect();
    let tape = Tape::new();
    let m = model.bind_constants(&tape)?;
    let q = post.bind_constants(&tape)?;
    let est = elbo_vars(&m, &q, tape.constant(y.y.clone()), &gumbels)?.values(samples);
    est.check_finite()?;
    Ok(est)
}
