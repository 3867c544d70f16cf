//! The three-level mixture form
//!
//! ```text
//! z_t ~ GS(f(z_{t-1}, x_{t-1}), tau)
//! x_1 = z_1 . mu^x,   x_t = sum_k z_tk (A_k x_{t-1} + c_k)
//! y_t ~ N(C x_t, diag Q)
//! ```
//!
//! with conversions to and from the two-level model, and the
//! block-tridiagonal Gaussian used as the latent-trajectory posterior.
//!
//! The reverse conversion expands the observation covariance to
//! `R_t = Q + sum_k z_tk C A_k F Q F^T A_k^T C^T`, which is dense and state
//! dependent. [`to_gdm`] keeps the two-level model diagonal and state free by
//! using `diag(Q) + (1/K) sum_k diag(C A_k F Q F^T A_k^T C^T)`.

mod blocktri;
mod elbo3;

pub use blocktri::{BlockCholesky, BlockTriGaussian, NodePotential, PairwiseFactor};
pub use elbo3::{elbo3, Elbo3Terms, LatentPosterior3, StatePosterior3};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffmath::{Matrix, Tape};
use crate::error::{GdmError, Result};
use crate::gumbel::{gs_relax, sample_gumbel};
use crate::model::{check_simplex_rows, GdmParams, ObsSeries, SoftStateSeq, TransitionFamily};

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture3Params {
    /// `1 x K`.
    pub prior_logits: Matrix,
    /// `K x D`; row `k` is `mu^x_k`.
    pub latent_prior: Matrix,
    /// `K` matrices `A_k`, each `D x D`.
    pub dynamics: Vec<Matrix>,
    /// `K x D`; row `k` is `c_k`.
    pub offsets: Matrix,
    /// `N x D` emission `C`.
    pub emission: Matrix,
    /// `1 x N` emission variances (diagonal of `Q`).
    pub emission_noise: Matrix,
    /// `K x D` per-state latent variances. All zero for the deterministic
    /// latent dynamics of the plain mixture form; the variational bound
    /// needs them positive.
    pub latent_noise: Matrix,
    /// Transition over `(z_{t-1}, x_{t-1})`.
    pub transition: TransitionFamily,
    pub temperature: f64,
}

impl Mixture3Params {
    pub fn k(&self) -> usize {
        self.prior_logits.cols()
    }

    pub fn d(&self) -> usize {
        self.emission.cols()
    }

    pub fn n(&self) -> usize {
        self.emission.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, n) = (self.k(), self.d(), self.n());
        if k == 0 || d == 0 || n == 0 {
            return Err(GdmError::Dimension(format!("empty model K={k}, D={d}, N={n}")));
        }
        let shapes = [
            ("prior_logits", self.prior_logits.shape(), (1, k)),
            ("latent_prior", self.latent_prior.shape(), (k, d)),
            ("offsets", self.offsets.shape(), (k, d)),
            ("emission_noise", self.emission_noise.shape(), (1, n)),
            ("latent_noise", self.latent_noise.shape(), (k, d)),
        ];
        for (what, got, want) in shapes {
            if got != want {
                return Err(GdmError::Dimension(format!("{what} is {got:?}, expected {want:?}")));
            }
        }
        if self.dynamics.len() != k || self.dynamics.iter().any(|a| a.shape() != (d, d)) {
            return Err(GdmError::Dimension(format!("expected {k} dynamics matrices of {d}x{d}")));
        }
        if self.emission_noise.data().iter().any(|&q| !(q > 0.0)) {
            return Err(GdmError::InvalidArgument("emission variances must be positive".into()));
        }
        if self.latent_noise.data().iter().any(|&q| !(q >= 0.0)) {
            return Err(GdmError::InvalidArgument("latent variances must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GdmError::InvalidTemperature(self.temperature));
        }
        self.transition.validate(k, d)
    }

    fn has_latent_noise(&self) -> bool {
        self.latent_noise.data().iter().any(|&q| q > 0.0)
    }

    /// Deterministic mixture step; `x_prev = None` gives `x_1 = z_1 . mu^x`.
    pub fn latent_step(&self, z: &[f64], x_prev: Option<&[f64]>) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(GdmError::Dimension(format!("z has {} entries, K={}", z.len(), self.k())));
        }
        check_simplex_rows(&Matrix::row_vector(z), 1e-9, true)?;
        let d = self.d();
        let mut out = vec![0.0; d];
        match x_prev {
            None => {
                for (k, &w) in z.iter().enumerate() {
                    for j in 0..d {
                        out[j] += w * self.latent_prior[(k, j)];
                    }
                }
            }
            Some(x) => {
                if x.len() != d {
                    return Err(GdmError::Dimension(format!("x has {} entries, D={d}", x.len())));
                }
                for (k, &w) in z.iter().enumerate() {
                    let a = &self.dynamics[k];
                    for i in 0..d {
                        let ax: f64 = a.row(i).iter().zip(x).map(|(p, q)| p * q).sum();
                        out[i] += w * (ax + self.offsets[(k, i)]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `C x` for a single latent point.
    pub fn emission_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.emission.matmul(&Matrix::col_vector(x))?.into_data())
    }

    /// Per-state latent variance mixed by `z`.
    fn mixed_latent_var(&self, z: &[f64]) -> Vec<f64> {
        let d = self.d();
        (0..d)
            .map(|j| z.iter().enumerate().map(|(k, w)| w * self.latent_noise[(k, j)]).sum())
            .collect()
    }

    /// Ancestral simulation returning states, latent trajectory (`T x D`) and
    /// observations. Per step: `K` Gumbels, then `D` latent normals when any
    /// latent variance is positive, then `N` emission normals.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R, t_len: usize) -> Result<(SoftStateSeq, Matrix, ObsSeries)> {
        self.validate()?;
        if t_len == 0 {
            return Err(GdmError::InvalidArgument("T must be at least 1".into()));
        }
        let (k, d, n) = (self.k(), self.d(), self.n());
        let noisy = self.has_latent_noise();
        let tape = Tape::new();
        let vars = crate::diffmath::Trainable::constants(&self.transition, &tape);
        let mut leaves = crate::diffmath::Leaves::new(&vars);
        let trans = self.transition.bind(&mut leaves)?;
        leaves.finish()?;
        let prior = tape.constant(self.prior_logits.clone());

        let mut zs = Matrix::zeros(t_len, k);
        let mut xs = Matrix::zeros(t_len, d);
        let mut ys = Matrix::zeros(t_len, n);
        let mut h = trans.initial_state(1);
        for t in 0..t_len {
            let g = sample_gumbel(rng, 1, k);
            let logits = if t == 0 {
                prior
            } else {
                let zp = tape.constant(zs.row_matrix(t - 1));
                let xp = tape.constant(xs.row_matrix(t - 1));
                let (l, h_new) = trans.step(zp, xp, h)?;
                h = h_new;
                l
            };
            let z = gs_relax(logits, &g, self.temperature)?.value().clone();
            let mut x = self.latent_step(z.data(), if t == 0 { None } else { Some(xs.row(t - 1)) })?;
            if noisy {
                let var = self.mixed_latent_var(z.data());
                for (xj, v) in x.iter_mut().zip(var) {
                    let e: f64 = StandardNormal.sample(rng);
                    *xj += v.sqrt() * e;
                }
            }
            let mean = self.emission_mean(&x)?;
            for j in 0..n {
                let e: f64 = StandardNormal.sample(rng);
                ys[(t, j)] = mean[j] + self.emission_noise[(0, j)].sqrt() * e;
            }
            zs.row_mut(t).copy_from_slice(z.data());
            xs.row_mut(t).copy_from_slice(&x);
        }
        Ok((SoftStateSeq { z: zs }, xs, ObsSeries::new(ys, None)?))
    }

    /// Re-expresses the model in latent coordinates `x' = M x`:
    /// `A -> M A M^-1`, `c -> M c`, `C -> C M^-1`, `mu^x -> M mu^x`, and the
    /// transition input weights absorb `M^-1`. Latent variances transform
    /// only under diagonal `M`.
    pub fn reparameterize(&self, m: &Matrix) -> Result<Self> {
        let d = self.d();
        if m.shape() != (d, d) {
            return Err(GdmError::Dimension(format!("M is {:?}, expected ({d}, {d})", m.shape())));
        }
        let m_inv = m.pseudo_inverse("reparameterization M")?;
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || m[(i, j)] == 0.0));
        let latent_noise = if !self.has_latent_noise() {
            self.latent_noise.clone()
        } else if diagonal {
            Matrix::from_fn(self.k(), d, |k, j| self.latent_noise[(k, j)] * m[(j, j)] * m[(j, j)])
        } else {
            return Err(GdmError::InvalidArgument(
                "non-diagonal reparameterization of diagonal latent noise".into(),
            ));
        };
        let mt = m.transpose();
        Ok(Self {
            prior_logits: self.prior_logits.clone(),
            latent_prior: self.latent_prior.matmul(&mt)?,
            dynamics: self
                .dynamics
                .iter()
                .map(|a| m.matmul(a)?.matmul(&m_inv))
                .collect::<Result<_>>()?,
            offsets: self.offsets.matmul(&mt)?,
            emission: self.emission.matmul(&m_inv)?,
            emission_noise: self.emission_noise.clone(),
            latent_noise,
            transition: self.transition.reparameterize_input(&m_inv)?,
            temperature: self.temperature,
        })
    }
}

/// Two-level to three-level: `A_k = F S_k`, `c_k = F b_k`, `C = F^+`,
/// `mu^x_k = F mu_k`, `Q = s^2`. Latent variances are zero.
pub fn to_mixture3(p: &GdmParams) -> Result<Mixture3Params> {
    p.validate()?;
    let f = &p.proj;
    let emission = f.pseudo_inverse("projection F")?;
    let ft = f.transpose();
    Ok(Mixture3Params {
        prior_logits: p.prior_logits.clone(),
        latent_prior: p.obs_prior.matmul(&ft)?,
        dynamics: p.dynamics.iter().map(|s| f.matmul(s)).collect::<Result<_>>()?,
        offsets: p.offsets.matmul(&ft)?,
        emission,
        emission_noise: p.obs_noise.map(|s| s * s),
        latent_noise: Matrix::zeros(p.k(), p.d()),
        transition: p.transition.clone(),
        temperature: p.temperature,
    })
}

/// Three-level to two-level: `S_k = C A_k`, `b_k = C c_k`, `F = C^+`,
/// `mu_k = C mu^x_k`, with the diagonal state-averaged noise surrogate
/// described in the module docs.
pub fn to_gdm(m: &Mixture3Params) -> Result<GdmParams> {
    m.validate()?;
    let c = &m.emission;
    let f = c.pseudo_inverse("emission C")?;
    let ct = c.transpose();
    let n = m.n();
    let q = Matrix::from_fn(n, n, |i, j| if i == j { m.emission_noise[(0, i)] } else { 0.0 });
    let fqft = f.matmul(&q)?.matmul(&f.transpose())?;
    let mut var = m.emission_noise.clone();
    for a in &m.dynamics {
        let ca = c.matmul(a)?;
        let corr = ca.matmul(&fqft)?.matmul(&ca.transpose())?;
        for j in 0..n {
            var[(0, j)] += corr[(j, j)] / m.k() as f64;
        }
    }
    Ok(GdmParams {
        prior_logits: m.prior_logits.clone(),
        obs_prior: m.latent_prior.matmul(&ct)?,
        proj: f,
        dynamics: m.dynamics.iter().map(|a| c.matmul(a)).collect::<Result<_>>()?,
        offsets: m.offsets.matmul(&ct)?,
        obs_noise: var.map(f64::sqrt),
        transition: m.transition.clone(),
        temperature: m.temperature,
    })
}

#[cfg(test)]
mod tests;
