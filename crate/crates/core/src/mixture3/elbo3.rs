//! Single-sample evidence bound for the three-level model.
//!
//! Sampling follows the structured posterior `q(x, z) = q(z) q(x | z)`:
//! latent points are first initialized from the data as `F y_t` with
//! `F = C^+`, the states are drawn sequentially from
//! `q(z_t | z_{t-1}, x_{t-1})` on those initial points, and the trajectory
//! is then drawn from a block-tridiagonal Gaussian whose transition factors
//! are the generative dynamics at the sampled states and whose node
//! potentials are free per-step parameters.
//!
//! The estimate is computed on plain values. The latent model needs positive
//! per-state variances here; the deterministic form has no density over `x`.

use rand::Rng;

use super::blocktri::{BlockTriGaussian, NodePotential, PairwiseFactor};
use super::Mixture3Params;
use crate::diffmath::{Leaves, Matrix, Tape, Trainable};
use crate::error::{GdmError, Result};
use crate::gumbel::{gs_log_density, gs_relax, sample_gumbel};
use crate::model::{ObsSeries, TransitionFamily};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `q(z_1) = GS(prior_logits)`, `q(z_t | z_{t-1}, x_{t-1})` from a
/// transition family over the initialized latent points.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePosterior3 {
    pub prior_logits: Matrix,
    pub transition: TransitionFamily,
}

/// Node potentials `N(x_t | m_t, diag r_t)` of the trajectory posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior3 {
    pub node_means: Matrix,
    pub node_vars: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Elbo3Terms {
    /// `sum_t log p(y_t | x_t)`.
    pub emission: f64,
    /// `log p(x_1 | z_1) + sum_t log p(x_t | x_{t-1}, z_t)`.
    pub latent: f64,
    /// `log p(z_1) + sum_t log p(z_t | z_{t-1}, x_{t-1})`.
    pub states: f64,
    pub log_qx: f64,
    pub log_qz: f64,
}

impl Elbo3Terms {
    pub fn total(&self) -> f64 {
        self.emission + self.latent + self.states - self.log_qx - self.log_qz
    }
}

fn gauss_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v))
        .sum()
}

fn mix_rows(z: &[f64], rows: &Matrix) -> Vec<f64> {
    (0..rows.cols())
        .map(|j| z.iter().enumerate().map(|(k, w)| w * rows[(k, j)]).sum())
        .collect()
}

fn mix_mats(z: &[f64], mats: &[Matrix]) -> Matrix {
    let mut out = Matrix::zeros(mats[0].rows(), mats[0].cols());
    for (w, m) in z.iter().zip(mats) {
        out.add_assign(&m.scale(*w));
    }
    out
}

pub fn elbo3<R: Rng + ?Sized>(
    params: &Mixture3Params,
    qz: &StatePosterior3,
    qx: &LatentPosterior3,
    y: &ObsSeries,
    rng: &mut R,
) -> Result<Elbo3Terms> {
    params.validate()?;
    let (k, d, n) = (params.k(), params.d(), params.n());
    let t_len = y.len();
    if t_len == 0 || y.dim() != n {
        return Err(GdmError::Dimension(format!(
            "series is {}x{}, model expects N={n}",
            t_len,
            y.dim()
        )));
    }
    if params.latent_noise.data().iter().any(|&v| !(v > 0.0)) {
        return Err(GdmError::NotPositiveDefinite(
            "the bound needs positive latent variances for every state".into(),
        ));
    }
    if qx.node_means.shape() != (t_len, d) || qx.node_vars.shape() != (t_len, d) {
        return Err(GdmError::Dimension(format!(
            "node potentials must be {t_len}x{d}, got {:?} / {:?}",
            qx.node_means.shape(),
            qx.node_vars.shape()
        )));
    }
    if qz.prior_logits.shape() != (1, k) {
        return Err(GdmError::Dimension(format!("state posterior prior must be 1x{k}")));
    }
    qz.transition.validate(k, d)?;

    let f = params.emission.pseudo_inverse("emission C")?;
    let x_init = y.y.matmul(&f.transpose())?;

    // States, sequentially, on the initialized trajectory.
    let tape = Tape::new();
    let vars = qz.transition.constants(&tape);
    let mut leaves = Leaves::new(&vars);
    let q_trans = qz.transition.bind(&mut leaves)?;
    leaves.finish()?;
    let gumbels = sample_gumbel(rng, t_len, k);
    let mut z = Matrix::zeros(t_len, k);
    let mut log_qz = 0.0;
    let mut h = q_trans.initial_state(1);
    for t in 0..t_len {
        let logits = if t == 0 {
            tape.constant(qz.prior_logits.clone())
        } else {
            let zp = tape.constant(z.row_matrix(t - 1));
            let xp = tape.constant(x_init.row_matrix(t - 1));
            let (l, h_new) = q_trans.step(zp, xp, h)?;
            h = h_new;
            l
        };
        let zt = gs_relax(logits, &gumbels.row_matrix(t), params.temperature)?;
        log_qz += gs_log_density(zt, logits, params.temperature)?.item();
        let zv = zt.value().clone();
        z.row_mut(t).copy_from_slice(zv.data());
    }

    // Trajectory given states.
    let factors: Vec<PairwiseFactor> = (1..t_len)
        .map(|t| PairwiseFactor {
            a: mix_mats(z.row(t), &params.dynamics),
            b: mix_rows(z.row(t), &params.offsets),
            q: mix_rows(z.row(t), &params.latent_noise),
        })
        .collect();
    let nodes: Vec<NodePotential> = (0..t_len)
        .map(|t| NodePotential {
            m: qx.node_means.row(t).to_vec(),
            r: qx.node_vars.row(t).to_vec(),
        })
        .collect();
    let q_x = BlockTriGaussian::assemble(&factors, &nodes)?;
    let (x, _, log_qx) = q_x.sample(rng)?;

    let mut emission = 0.0;
    let mut latent = 0.0;
    for t in 0..t_len {
        let mean = params.emission_mean(x.row(t))?;
        emission += gauss_diag(y.y.row(t), &mean, params.emission_noise.data());
        let prev = if t == 0 { None } else { Some(x.row(t - 1)) };
        let lat_mean = params.latent_step(z.row(t), prev)?;
        latent += gauss_diag(x.row(t), &lat_mean, &mix_rows(z.row(t), &params.latent_noise));
    }

    let tape = Tape::new();
    let vars = params.transition.constants(&tape);
    let mut leaves = Leaves::new(&vars);
    let p_trans = params.transition.bind(&mut leaves)?;
    leaves.finish()?;
    let zv = tape.constant(z.clone());
    let mut states = gs_log_density(zv.row(0)?, tape.constant(params.prior_logits.clone()), params.temperature)?.item();
    if t_len > 1 {
        let logits = p_trans.sequence(zv.rows(0, t_len - 1)?, tape.constant(x.slice_rows(0, t_len - 1)))?;
        states += gs_log_density(zv.rows(1, t_len)?, logits, params.temperature)?.item();
    }

    let terms = Elbo3Terms {
        emission,
        latent,
        states,
        log_qx,
        log_qz,
    };
    if !terms.total().is_finite() {
        return Err(GdmError::NonFinite(format!("three-level bound terms {terms:?}")));
    }
    Ok(terms)
}
