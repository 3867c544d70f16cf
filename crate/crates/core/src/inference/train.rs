//! Stochastic variational training of model and posterior together.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::elbo::{check_pair, elbo_vars};
use super::posterior::PosteriorParams;
use crate::diffmath::{adam_step, clip_global_norm, AdamConfig, AdamState, Leaves, Matrix, Tape, Trainable};
use crate::error::{GdmError, Result};
use crate::gumbel::sample_gumbel;
use crate::model::{GdmParams, ObsSeries, Variant, DEFAULT_TEMPERATURE};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub k: usize,
    pub d: usize,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Global gradient-norm bound.
    pub gradient_clip: f64,
    pub elbo_samples: usize,
    /// Calls the checkpoint hook every this many steps; 0 disables it.
    pub checkpoint_every: usize,
    /// The learning rate is multiplied by `decay_factor` every
    /// `decay_every` steps.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            learning_rate: 1e-2,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            gradient_clip: 10.0,
            elbo_samples: 1,
            checkpoint_every: 0,
            decay_every: 2000,
            decay_factor: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(GdmError::InvalidArgument("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GdmError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.elbo_samples < 1 {
            return Err(GdmError::InvalidArgument("ELBO samples must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GdmError::InvalidTemperature(self.temperature));
        }
        if !(self.gradient_clip > 0.0) {
            return Err(GdmError::InvalidArgument("gradient clip must be positive".into()));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(GdmError::InvalidArgument("decay needs a positive period and a factor in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    /// Number of completed updates.
    pub step: usize,
    /// Per-timestep ELBO averaged over trials, before the update.
    pub elbo: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: GdmParams,
    pub posterior: PosteriorParams,
    pub adam: AdamState,
    pub step: usize,
    pub trace: Vec<TraceRow>,
}

impl TrainState {
    /// Data-driven model initialization and a small random posterior, both
    /// from `seeded(cfg.seed)`.
    pub fn init(series: &[ObsSeries], spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.seed);
        let model = GdmParams::init(&mut rng, series, spec.k, spec.d, spec.variant, cfg.temperature)?;
        let posterior = PosteriorParams::init(&mut rng, spec.variant, spec.k, model.n(), cfg.temperature);
        let adam = AdamState::new(&joint_arrays(&model, &posterior));
        Ok(Self {
            model,
            posterior,
            adam,
            step: 0,
            trace: Vec::new(),
        })
    }
}

/// Training stopped early; carries the last state whose loss was finite
/// when there is one.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: GdmError,
    pub last_good: Option<Box<TrainState>>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.last_good {
            Some(s) => write!(f, "{} (last good state at step {})", self.error, s.step),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for TrainFailure {}

impl From<TrainFailure> for GdmError {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

fn joint_arrays(model: &GdmParams, post: &PosteriorParams) -> Vec<Matrix> {
    let mut v = model.arrays();
    v.extend(post.arrays());
    v
}

/// Generator for update `step`; independent of how the run was split.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = seeded(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Loss `-(1/|trials|) sum_i ELBO_i / T_i` and its gradient with respect to
/// the model arrays followed by the posterior arrays.
pub fn loss_and_gradient<R: Rng + ?Sized>(
    model: &GdmParams,
    post: &PosteriorParams,
    series: &[ObsSeries],
    samples: usize,
    rng: &mut R,
) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let mut vars = model.leaves(&tape);
    vars.extend(post.leaves(&tape));
    let mut leaves = Leaves::new(&vars);
    let m = model.bind(&mut leaves)?;
    let q = post.bind(&mut leaves)?;
    leaves.finish()?;
    let mut per_trial = Vec::with_capacity(series.len());
    for y in series {
        let gumbels: Vec<Matrix> = (0..samples).map(|_| sample_gumbel(rng, y.len(), model.k())).collect();
        let ev = elbo_vars(&m, &q, tape.constant(y.y.clone()), &gumbels)?;
        ev.values(samples).check_finite()?;
        per_trial.push(ev.elbo()?.scale(1.0 / y.len() as f64));
    }
    let loss = tape.vstack(&per_trial)?.mean().neg();
    let value = loss.item();
    if !value.is_finite() {
        return Err(GdmError::NonFinite(format!("training loss {value}")));
    }
    let grads = tape.backward(loss)?.params();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(GdmError::NonFinite(format!("gradient of parameter array {i}")));
    }
    Ok((value, grads))
}

fn check_series(series: &[ObsSeries], state: &TrainState) -> Result<()> {
    if series.is_empty() {
        return Err(GdmError::InvalidArgument("at least one training series is required".into()));
    }
    for y in series {
        check_pair(&state.model, &state.posterior, y)?;
    }
    Ok(())
}

/// Trains from a fresh initialization.
pub fn train(series: &[ObsSeries], spec: &ModelSpec, cfg: &TrainConfig) -> std::result::Result<TrainState, TrainFailure> {
    let state = TrainState::init(series, spec, cfg).map_err(|error| TrainFailure { error, last_good: None })?;
    train_from(series, state, cfg, |_| Ok(()))
}

/// Continues `state` until `cfg.steps` updates have been made in total.
/// `on_checkpoint` sees the state after every `cfg.checkpoint_every`-th
/// update. Two consecutive non-finite losses abort the run.
pub fn train_from(
    series: &[ObsSeries],
    mut state: TrainState,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> std::result::Result<TrainState, TrainFailure> {
    let fail = |error: GdmError, last_good: &TrainState| TrainFailure {
        error,
        last_good: Some(Box::new(last_good.clone())),
    };
    if let Err(e) = cfg.validate().and_then(|_| check_series(series, &state)) {
        return Err(fail(e, &state));
    }
    let mut last_good = state.clone();
    let mut bad_in_a_row = 0;
    while state.step < cfg.steps {
        let mut rng = step_rng(cfg.seed, state.step);
        let outcome = loss_and_gradient(&state.model, &state.posterior, series, cfg.elbo_samples, &mut rng);
        let (loss, mut grads) = match outcome {
            Ok(v) => v,
            Err(e @ (GdmError::NonFinite(_) | GdmError::NonPositiveLog { .. } | GdmError::NotOnSimplex(_))) => {
                bad_in_a_row += 1;
                if bad_in_a_row >= 2 {
                    let error = GdmError::Diverged {
                        step: state.step + 1,
                        reason: e.to_string(),
                    };
                    return Err(fail(error, &last_good));
                }
                state.step += 1;
                continue;
            }
            Err(e) => return Err(fail(e, &last_good)),
        };
        bad_in_a_row = 0;
        last_good = state.clone();

        let grad_norm = clip_global_norm(&mut grads, cfg.gradient_clip);
        let adam_cfg = AdamConfig {
            lr: cfg.learning_rate_at(state.step),
            ..AdamConfig::default()
        };
        let arrays = joint_arrays(&state.model, &state.posterior);
        let (new_arrays, adam) = adam_step(&arrays, &grads, &state.adam, &adam_cfg).map_err(|e| fail(e, &last_good))?;
        let split = state.model.num_arrays();
        state.model = state.model.with_arrays(&new_arrays[..split]).map_err(|e| fail(e, &last_good))?;
        state.posterior = state
            .posterior
            .with_arrays(&new_arrays[split..])
            .map_err(|e| fail(e, &last_good))?;
        state.adam = adam;
        state.step += 1;
        state.trace.push(TraceRow {
            step: state.step,
            elbo: -loss,
            grad_norm,
        });
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            on_checkpoint(&state).map_err(|e| fail(e, &state))?;
        }
    }
    Ok(state)
}

/// Writes the trace as CSV with header `step,elbo,grad_norm`.
pub fn write_trace<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "elbo", "grad_norm"])?;
    for r in rows {
        w.write_record([r.step.to_string(), r.elbo.to_string(), r.grad_norm.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
