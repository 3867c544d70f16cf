//! The NASCAR track: two straightaways joined by two semicircular turns.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diffmath::Matrix;
use crate::error::{GdmError, Result};
use crate::gumbel::{argmax, gs_sample, sample_gumbel};
use crate::mixture3::Mixture3Params;
use crate::model::{LinearTransition, ObsSeries, SoftStateSeq, TransitionFamily};
use crate::rng::seeded;

pub const NASCAR_K: usize = 4;
pub const NASCAR_D: usize = 2;

/// Region classifier weights: logit `k` is `T_k . x + t_k`.
pub const REGION_WEIGHTS: [[f64; 2]; 4] = [[10.0, 0.0], [-10.0, 0.0], [0.0, 10.0], [0.0, -10.0]];
pub const REGION_BIAS: [f64; 4] = [-20.0, -20.0, -10.0, -10.0];
/// Centres of the right and left turns.
pub const TURN_CENTRES: [[f64; 2]; 2] = [[2.0, 0.0], [-2.0, 0.0]];
/// Every state starts at the same point on the top straightaway.
pub const START: [f64; 2] = [0.0, 1.5];
pub const TURN_ANGLE: f64 = PI / 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NascarVariant {
    Standard,
    SoftSticky,
}

impl fmt::Display for NascarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NascarVariant::Standard => "standard",
            NascarVariant::SoftSticky => "soft-sticky",
        })
    }
}

impl FromStr for NascarVariant {
    type Err = GdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(NascarVariant::Standard),
            "soft-sticky" => Ok(NascarVariant::SoftSticky),
            other => Err(GdmError::InvalidArgument(format!(
                "unknown NASCAR variant '{other}' (expected standard or soft-sticky)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NascarConfig {
    pub variant: NascarVariant,
    pub t_len: usize,
    pub temperature: f64,
    /// Scale `c` of the soft-sticky logits.
    pub softness: f64,
    /// Weight `gamma` of the previous state in the soft-sticky logits.
    pub stickiness: f64,
    /// Lower end of the speed range; 1 means fixed speed.
    pub min_speed: f64,
    pub n_obs: usize,
    /// Observation noise standard deviation.
    pub obs_noise: f64,
    /// Seed of the trial's noise.
    pub seed: u64,
    /// Seed of the random emission, shared by trials of one dataset.
    pub emission_seed: u64,
}

impl NascarConfig {
    pub fn standard(seed: u64) -> Self {
        Self {
            variant: NascarVariant::Standard,
            t_len: 1000,
            temperature: 0.01,
            softness: 0.25,
            stickiness: 0.6,
            min_speed: 1.0,
            n_obs: 10,
            obs_noise: 0.05,
            seed,
            emission_seed: 0,
        }
    }

    pub fn soft_sticky(seed: u64) -> Self {
        Self {
            variant: NascarVariant::SoftSticky,
            temperature: 0.99,
            ..Self::standard(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len < 1 {
            return Err(GdmError::InvalidArgument("T must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GdmError::InvalidTemperature(self.temperature));
        }
        if !(0.0..1.0).contains(&self.stickiness) {
            return Err(GdmError::InvalidArgument(format!(
                "stickiness must lie in [0, 1), got {}",
                self.stickiness
            )));
        }
        if !(self.min_speed > 0.0 && self.min_speed <= 1.0) {
            return Err(GdmError::InvalidArgument(format!(
                "minimum speed must lie in (0, 1], got {}",
                self.min_speed
            )));
        }
        if !(self.softness > 0.0 && self.softness.is_finite()) {
            return Err(GdmError::InvalidArgument("softness must be positive".into()));
        }
        if self.n_obs < NASCAR_D {
            return Err(GdmError::InvalidArgument(format!("need at least {NASCAR_D} observed dimensions")));
        }
        if !(self.obs_noise > 0.0) {
            return Err(GdmError::InvalidArgument("observation noise must be positive".into()));
        }
        Ok(())
    }
}

/// Clockwise rotation by `theta`: `[[cos, sin], [-sin, cos]]`.
pub fn rotation(theta: f64) -> Matrix {
    let (s, c) = theta.sin_cos();
    Matrix::from_rows(&[vec![c, s], vec![-s, c]]).expect("2x2")
}

/// Per-state dynamics `A_k` and offsets `c_k` (rows).
pub fn nascar_dynamics() -> (Vec<Matrix>, Matrix) {
    let turn = rotation(TURN_ANGLE);
    let eye = Matrix::identity(2);
    let fixed = |a: &Matrix, fp: [f64; 2]| -> Vec<f64> {
        // c = -(A - I) fp
        (0..2)
            .map(|i| -((a[(i, 0)] - eye[(i, 0)]) * fp[0] + (a[(i, 1)] - eye[(i, 1)]) * fp[1]))
            .collect()
    };
    let offsets = Matrix::from_rows(&[
        fixed(&turn, TURN_CENTRES[0]),
        fixed(&turn, TURN_CENTRES[1]),
        vec![0.1, 0.0],
        vec![-0.25, 0.0],
    ])
    .expect("4x2");
    (vec![turn.clone(), turn, eye.clone(), eye], offsets)
}

pub fn region_logits(x: &[f64]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = REGION_WEIGHTS[k][0] * x[0] + REGION_WEIGHTS[k][1] * x[1] + REGION_BIAS[k];
    }
    out
}

/// Seeded `N x 2` emission with entries `N(0, 1/2)`.
pub fn nascar_emission(n_obs: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    Matrix::from_fn(n_obs, NASCAR_D, |_, _| normal.sample(&mut rng))
}

/// Ground-truth three-level parameters of the standard track. `z_1` is
/// drawn from the region logits at the start point.
pub fn nascar_params(cfg: &NascarConfig) -> Result<Mixture3Params> {
    cfg.validate()?;
    let (dynamics, offsets) = nascar_dynamics();
    let weights = Matrix::from_fn(NASCAR_K, NASCAR_D, |k, j| REGION_WEIGHTS[k][j]);
    let bias = Matrix::row_vector(&REGION_BIAS);
    let params = Mixture3Params {
        prior_logits: Matrix::row_vector(&region_logits(&START)),
        latent_prior: Matrix::from_fn(NASCAR_K, NASCAR_D, |_, j| START[j]),
        dynamics,
        offsets,
        emission: nascar_emission(cfg.n_obs, cfg.emission_seed),
        emission_noise: Matrix::filled(1, cfg.n_obs, cfg.obs_noise * cfg.obs_noise),
        latent_noise: Matrix::zeros(NASCAR_K, NASCAR_D),
        transition: TransitionFamily::Linear(LinearTransition { weights, bias }),
        temperature: cfg.temperature,
    };
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NascarTrial {
    /// Observations with labels `argmax z_t`.
    pub series: ObsSeries,
    pub states: SoftStateSeq,
    /// `T x 2` latent track positions.
    pub latent: Matrix,
    pub emission: Matrix,
}

/// Simulates one trial. Per step the generator draws 4 Gumbels, a uniform
/// speed when the dominant state changes and the speed range is
/// non-degenerate, then `N` observation normals.
pub fn generate_nascar(cfg: &NascarConfig) -> Result<NascarTrial> {
    let params = nascar_params(cfg)?;
    let mut rng = seeded(cfg.seed);
    let (t_len, n) = (cfg.t_len, cfg.n_obs);
    let mut zs = Matrix::zeros(t_len, NASCAR_K);
    let mut xs = Matrix::zeros(t_len, NASCAR_D);
    let mut ys = Matrix::zeros(t_len, n);
    let mut speed = 1.0;
    let mut last_state = usize::MAX;
    for t in 0..t_len {
        let g = sample_gumbel(&mut rng, 1, NASCAR_K);
        let logits: Vec<f64> = if t == 0 {
            params.prior_logits.data().to_vec()
        } else {
            let base = region_logits(xs.row(t - 1));
            match cfg.variant {
                NascarVariant::Standard => base.to_vec(),
                NascarVariant::SoftSticky => {
                    let (c, gamma) = (cfg.softness, cfg.stickiness);
                    (0..NASCAR_K)
                        .map(|k| c * (1.0 - gamma) * base[k] + gamma * zs[(t - 1, k)])
                        .collect()
                }
            }
        };
        let z = gs_sample(&logits, g.data(), cfg.temperature)?.z;
        let state = argmax(&z);
        if state != last_state && cfg.min_speed < 1.0 {
            speed = rng.random_range(cfg.min_speed..=1.0);
        }
        last_state = state;
        let x: Vec<f64> = if t == 0 {
            params.latent_step(&z, None)?
        } else {
            let prev = xs.row(t - 1);
            (0..NASCAR_D)
                .map(|i| {
                    (0..NASCAR_K)
                        .map(|k| {
                            let a = &params.dynamics[k];
                            let ax: f64 = a.row(i).iter().zip(prev).map(|(p, q)| p * q).sum();
                            z[k] * (ax + speed * params.offsets[(k, i)])
                        })
                        .sum()
                })
                .collect()
        };
        let mean = params.emission_mean(&x)?;
        for j in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            ys[(t, j)] = mean[j] + cfg.obs_noise * e;
        }
        zs.row_mut(t).copy_from_slice(&z);
        xs.row_mut(t).copy_from_slice(&x);
    }
    let states = SoftStateSeq { z: zs };
    let labels = states.argmax();
    Ok(NascarTrial {
        series: ObsSeries::new(ys, Some(labels))?,
        states,
        latent: xs,
        emission: params.emission,
    })
}

/// Trials `seed, seed + 1, ...` sharing one emission (seeded by `cfg.emission_seed`).
pub fn generate_trials(cfg: &NascarConfig, trials: usize) -> Result<Vec<NascarTrial>> {
    (0..trials as u64)
        .map(|i| {
            generate_nascar(&NascarConfig {
                seed: cfg.seed + i,
                ..cfg.clone()
            })
        })
        .collect()
}
