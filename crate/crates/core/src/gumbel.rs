//! Gumbel noise, the Gumbel-Max trick and the Gumbel-Softmax relaxation.
//!
//! A relaxed sample is `z = softmax((logits + g) / tau)` with `g ~ Gumbel(0, 1)`.
//! Samples are floored at [`SIMPLEX_FLOOR`] and renormalized so every later
//! logarithm is finite. The scale of the noise is fixed to one.

use rand::Rng;

use crate::diffmath::{Matrix, Tape, Var};
use crate::error::{GdmError, Result};

/// Smallest entry a relaxed sample may take.
pub const SIMPLEX_FLOOR: f64 = 1e-6;

const UNIFORM_CLAMP: f64 = 1e-12;

/// Standard Gumbel draws, filled row-major.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
        -(-u.ln()).ln()
    })
}

/// Index maximizing `logits + gumbels`; ties go to the lowest index.
pub fn gumbel_max(logits: &[f64], gumbels: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(GdmError::InvalidArgument("gumbel_max of empty logits".into()));
    }
    if logits.len() != gumbels.len() {
        return Err(GdmError::Dimension(format!(
            "gumbel_max: {} logits but {} gumbels",
            logits.len(),
            gumbels.len()
        )));
    }
    Ok(argmax(
        &logits.iter().zip(gumbels).map(|(p, g)| p + g).collect::<Vec<_>>(),
    ))
}

/// Lowest index of the maximum entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A single relaxed categorical draw together with what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GsSample {
    pub z: Vec<f64>,
    pub gumbels: Vec<f64>,
    pub logits: Vec<f64>,
    pub temperature: f64,
}

/// Relaxed sample from explicit noise.
pub fn gs_sample(logits: &[f64], gumbels: &[f64], tau: f64) -> Result<GsSample> {
    if logits.len() != gumbels.len() {
        return Err(GdmError::Dimension(format!(
            "gs_sample: {} logits but {} gumbels",
            logits.len(),
            gumbels.len()
        )));
    }
    let tape = Tape::new();
    let l = tape.constant(Matrix::row_vector(logits));
    let z = gs_relax(l, &Matrix::row_vector(gumbels), tau)?;
    let z = z.value().data().to_vec();
    Ok(GsSample {
        z,
        gumbels: gumbels.to_vec(),
        logits: logits.to_vec(),
        temperature: tau,
    })
}

/// Relaxed sample drawing fresh noise from `rng`.
pub fn gs_sample_rng<R: Rng + ?Sized>(rng: &mut R, logits: &[f64], tau: f64) -> Result<GsSample> {
    let g = sample_gumbel(rng, 1, logits.len());
    gs_sample(logits, g.data(), tau)
}

/// Row-wise pathwise relaxation on the tape: `floor(softmax((logits + g)/tau))`.
/// Differentiable in `logits`.
pub fn gs_relax<'t>(logits: Var<'t>, gumbels: &Matrix, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(GdmError::InvalidTemperature(tau));
    }
    let g = logits.tape().constant(gumbels.clone());
    Ok(logits.add(g)?.softmax_rows(tau)?.simplex_floor(SIMPLEX_FLOOR))
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Like [`gs_relax`], also returning the exact `log z` of the unfloored
/// sample, `log_softmax((logits + g)/tau)`. Densities evaluated there stay
/// those of the relaxed distribution even where the floor is active.
pub fn gs_relax_with_log<'t>(logits: Var<'t>, gumbels: &Matrix, tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    if !(tau > 0.0) {
        return Err(GdmError::InvalidTemperature(tau));
    }
    let g = logits.tape().constant(gumbels.clone());
    let perturbed = logits.add(g)?;
    let z = perturbed.softmax_rows(tau)?.simplex_floor(SIMPLEX_FLOOR);
    let scaled = perturbed.scale(1.0 / tau);
    let log_z = scaled.sub(scaled.logsumexp_rows())?;
    Ok((z, log_z))
}

/// Sum over rows of the relaxed categorical log-density of `z` (`B x K`)
/// under `logits` (`B x K`) at temperature `tau`:
///
/// `ln (K-1)! + (K-1) ln tau + sum_i [pi_i - (tau+1) ln z_i] - K lse_j(pi_j - tau ln z_j)`.
pub fn gs_log_density<'t>(z: Var<'t>, logits: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(GdmError::InvalidTemperature(tau));
    }
    let (b, k) = z.shape();
    if logits.shape() != (b, k) {
        return Err(z.value().mismatch("gs_log_density", &logits.value()));
    }
    let log_z = z.log().map_err(|e| match e {
        GdmError::NonPositiveLog { value, index } => GdmError::NotOnSimplex(format!(
            "entry {value} at row {}, column {} is not positive",
            index / k.max(1),
            index % k.max(1)
        )),
        other => other,
    })?;
    gs_log_density_at_log(log_z, logits, tau)
}

/// [`gs_log_density`] with the point given by its coordinate logarithms.
pub fn gs_log_density_at_log<'t>(log_z: Var<'t>, logits: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(GdmError::InvalidTemperature(tau));
    }
    let (b, k) = log_z.shape();
    if logits.shape() != (b, k) {
        return Err(log_z.value().mismatch("gs_log_density", &logits.value()));
    }
    let shifted = logits.sub(log_z.scale(tau))?;
    let lse = shifted.logsumexp_rows().sum();
    let constant = b as f64 * (ln_factorial(k.saturating_sub(1)) + (k as f64 - 1.0) * tau.ln());
    let linear = logits.sum().sub(log_z.sum().scale(tau + 1.0))?;
    Ok(linear.sub(lse.scale(k as f64))?.offset(constant))
}

/// Plain-value version of [`gs_log_density`] for a single simplex point.
pub fn gs_log_density_value(z: &[f64], logits: &[f64], tau: f64) -> Result<f64> {
    let tape = Tape::new();
    let zv = tape.constant(Matrix::row_vector(z));
    let lv = tape.constant(Matrix::row_vector(logits));
    Ok(gs_log_density(zv, lv, tau)?.item())
}
