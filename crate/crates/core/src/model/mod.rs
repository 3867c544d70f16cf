//! The two-level generative model.
//!
//! ```text
//! z_1 ~ GS(pi_1, tau)            z_t | z_{t-1}, y_{t-1} ~ GS(f(z_{t-1}, F y_{t-1}), tau)
//! y_1 ~ N(z_1 . mu, diag s^2)    y_t | y_{t-1}, z_t ~ N(sum_k z_tk (S_k F y_{t-1} + b_k), diag s^2)
//! ```

pub mod nn;
pub mod transition;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::diffmath::{ArrayCursor, Leaves, Matrix, Tape, Trainable, Var};
use crate::error::{GdmError, Result};
use crate::gumbel::{gs_log_density, gs_log_density_at_log, gs_relax, sample_gumbel};
pub use nn::{Fnn, GruCell};
pub use transition::{LinearTransition, RecurrentTransition, TrackedTransition, TransitionFamily, Variant};

pub const DEFAULT_TEMPERATURE: f64 = 0.99;

/// Relaxed state sequence: `T x K`, each row on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftStateSeq {
    pub z: Matrix,
}

impl SoftStateSeq {
    pub fn new(z: Matrix) -> Result<Self> {
        check_simplex_rows(&z, 1e-9, false)?;
        Ok(Self { z })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn k(&self) -> usize {
        self.z.cols()
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len()).map(|t| crate::gumbel::argmax(self.z.row(t))).collect()
    }
}

/// Rows must sum to one within `tol`; entries must be positive unless
/// `closed` admits the simplex boundary.
pub(crate) fn check_simplex_rows(z: &Matrix, tol: f64, closed: bool) -> Result<()> {
    for t in 0..z.rows() {
        let row = z.row(t);
        let s: f64 = row.iter().sum();
        let inside = |v: f64| if closed { (0.0..=1.0).contains(&v) } else { v > 0.0 && v <= 1.0 };
        if (s - 1.0).abs() > tol || !row.iter().all(|&v| inside(v)) {
            return Err(GdmError::NotOnSimplex(format!("row {t} = {row:?}")));
        }
    }
    Ok(())
}

/// Observation series `T x N` with optional integer labels per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSeries {
    pub y: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl ObsSeries {
    pub fn new(y: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if !y.is_finite() {
            return Err(GdmError::Data("observations contain non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != y.rows() {
                return Err(GdmError::Data(format!(
                    "{} labels for {} observations",
                    l.len(),
                    y.rows()
                )));
            }
        }
        Ok(Self { y, labels })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.cols()
    }

    /// Number of label classes (`max + 1`), if labelled.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }
}

/// All generative parameters of the two-level model.
#[derive(Debug, Clone, PartialEq)]
pub struct GdmParams {
    /// `1 x K` prior logits of `z_1`.
    pub prior_logits: Matrix,
    /// `K x N`; row `k` is the mean of `y_1` under state `k`.
    pub obs_prior: Matrix,
    /// `D x N` projection `F`.
    pub proj: Matrix,
    /// `K` matrices `S_k`, each `N x D`.
    pub dynamics: Vec<Matrix>,
    /// `K x N`; row `k` is `b_k`.
    pub offsets: Matrix,
    /// `1 x N` observation standard deviations.
    pub obs_noise: Matrix,
    pub transition: TransitionFamily,
    pub temperature: f64,
}

impl GdmParams {
    pub fn k(&self) -> usize {
        self.prior_logits.cols()
    }

    pub fn d(&self) -> usize {
        self.proj.rows()
    }

    pub fn n(&self) -> usize {
        self.proj.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, n) = (self.k(), self.d(), self.n());
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            GdmError::Dimension(format!("{what} is {got:?}, expected {want:?} (K={k}, D={d}, N={n})"))
        };
        if k == 0 || d == 0 || n == 0 {
            return Err(GdmError::Dimension(format!("empty model K={k}, D={d}, N={n}")));
        }
        if self.prior_logits.rows() != 1 {
            return Err(bad("prior_logits", self.prior_logits.shape(), (1, k)));
        }
        if self.obs_prior.shape() != (k, n) {
            return Err(bad("obs_prior", self.obs_prior.shape(), (k, n)));
        }
        if self.offsets.shape() != (k, n) {
            return Err(bad("offsets", self.offsets.shape(), (k, n)));
        }
        if self.obs_noise.shape() != (1, n) {
            return Err(bad("obs_noise", self.obs_noise.shape(), (1, n)));
        }
        if self.dynamics.len() != k {
            return Err(GdmError::Dimension(format!("{} dynamics matrices for K={k}", self.dynamics.len())));
        }
        for s in &self.dynamics {
            if s.shape() != (n, d) {
                return Err(bad("dynamics", s.shape(), (n, d)));
            }
        }
        if self.obs_noise.data().iter().any(|&s| !(s > 0.0)) {
            return Err(GdmError::InvalidArgument("observation noise must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GdmError::InvalidTemperature(self.temperature));
        }
        self.transition.validate(k, d)
    }

    /// Data-driven initialization: `F` from the top-`D` principal directions
    /// of the pooled centered observations, `S_k = F^+` plus `N(0, 0.01^2)`
    /// noise, `b_k = 0`, every row of `mu` the mean first observation, noise
    /// scales from the spread of first differences, uniform prior logits.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        series: &[ObsSeries],
        k: usize,
        d: usize,
        variant: Variant,
        temperature: f64,
    ) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| GdmError::InvalidArgument("at least one training series is required".into()))?;
        let n = first.dim();
        if d == 0 || d > n {
            return Err(GdmError::InvalidArgument(format!(
                "latent dimension D={d} must be between 1 and N={n}"
            )));
        }
        if k == 0 {
            return Err(GdmError::InvalidArgument("K must be at least 1".into()));
        }
        if series.iter().any(|s| s.dim() != n || s.is_empty()) {
            return Err(GdmError::Data("training series must be non-empty and share one dimension".into()));
        }

        let proj = principal_directions(series, d)?;
        let pinv = proj.pseudo_inverse("projection F")?;
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let dynamics = (0..k)
            .map(|_| pinv.add(&Matrix::from_fn(n, d, |_, _| normal.sample(rng))))
            .collect::<Result<Vec<_>>>()?;

        let mut mu = vec![0.0; n];
        for s in series {
            for (m, v) in mu.iter_mut().zip(s.y.row(0)) {
                *m += v / series.len() as f64;
            }
        }
        let obs_prior = Matrix::from_fn(k, n, |_, j| mu[j]);

        let mut sq = vec![0.0; n];
        let mut count = 0usize;
        for s in series {
            for t in 1..s.len() {
                for j in 0..n {
                    let dlt = s.y[(t, j)] - s.y[(t - 1, j)];
                    sq[j] += dlt * dlt;
                }
                count += 1;
            }
        }
        let obs_noise = Matrix::row_vector(
            &sq.iter()
                .map(|v| if count > 0 { (v / count as f64).sqrt().max(1e-3) } else { 1.0 })
                .collect::<Vec<_>>(),
        );

        let params = GdmParams {
            prior_logits: Matrix::zeros(1, k),
            obs_prior,
            proj,
            dynamics,
            offsets: Matrix::zeros(k, n),
            obs_noise,
            transition: TransitionFamily::init(rng, variant, k, d),
            temperature,
        };
        params.validate()?;
        Ok(params)
    }

    /// Binds the trainable arrays (see [`Trainable::arrays`]) to tape leaves.
    pub fn bind<'t>(&self, leaves: &mut Leaves<'_, 't>) -> Result<TrackedGdm<'t>> {
        let prior_logits = leaves.next()?;
        let obs_prior = leaves.next()?;
        let proj = leaves.next()?;
        let dynamics: Vec<Var<'t>> = (0..self.k()).map(|_| leaves.next()).collect::<Result<_>>()?;
        let offsets = leaves.next()?;
        let log_sigma = leaves.next()?;
        let transition = self.transition.bind(leaves)?;
        let tape = proj.tape();
        let dyn_t: Vec<Var<'t>> = dynamics.iter().map(|s| s.t()).collect();
        let dyn_blocks = tape.hstack(&dyn_t)?;
        let offset_rows: Vec<Var<'t>> = (0..self.k()).map(|i| offsets.row(i)).collect::<Result<_>>()?;
        let offset_row = tape.hstack(&offset_rows)?;
        Ok(TrackedGdm {
            prior_logits,
            obs_prior,
            proj_t: proj.t(),
            dyn_blocks,
            offset_row,
            log_sigma,
            transition,
            temperature: self.temperature,
        })
    }

    pub fn bind_constants<'t>(&self, tape: &'t Tape) -> Result<TrackedGdm<'t>> {
        let vars = self.constants(tape);
        let mut leaves = Leaves::new(&vars);
        let out = self.bind(&mut leaves)?;
        leaves.finish()?;
        Ok(out)
    }

    /// Transition logits for one step. `h_prev` is the recurrent state for
    /// the recurrent family (ignored otherwise); the advanced state is
    /// returned alongside the logits.
    pub fn transition_logits(
        &self,
        z_prev: &[f64],
        y_prev: &[f64],
        h_prev: Option<&Matrix>,
    ) -> Result<(Vec<f64>, Option<Matrix>)> {
        if z_prev.len() != self.k() || y_prev.len() != self.n() {
            return Err(GdmError::Dimension(format!(
                "transition_logits: z has {} entries (K={}), y has {} (N={})",
                z_prev.len(),
                self.k(),
                y_prev.len(),
                self.n()
            )));
        }
        check_simplex_rows(&Matrix::row_vector(z_prev), 1e-9, true)?;
        let tape = Tape::new();
        let m = self.bind_constants(&tape)?;
        let z = tape.constant(Matrix::row_vector(z_prev));
        let u = tape.constant(Matrix::row_vector(y_prev)).matmul(m.proj_t)?;
        let h = match (h_prev, m.transition.initial_state(1)) {
            (Some(h), Some(_)) => Some(tape.constant(h.clone())),
            (None, init) => init,
            (Some(_), None) => None,
        };
        let (logits, h) = m.transition.step(z, u, h)?;
        let logits = logits.value().data().to_vec();
        Ok((logits, h.map(|h| h.value().clone())))
    }

    /// Conditional mean of `y_t`; `y_prev = None` selects the first-step mean
    /// `z_1 . mu`.
    pub fn observation_mean(&self, z: &[f64], y_prev: Option<&[f64]>) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(GdmError::Dimension(format!("z has {} entries, K={}", z.len(), self.k())));
        }
        check_simplex_rows(&Matrix::row_vector(z), 1e-9, true)?;
        let tape = Tape::new();
        let m = self.bind_constants(&tape)?;
        let zv = tape.constant(Matrix::row_vector(z));
        let mean = match y_prev {
            None => m.first_mean(zv)?,
            Some(y) => {
                if y.len() != self.n() {
                    return Err(GdmError::Dimension(format!("y_prev has {} entries, N={}", y.len(), self.n())));
                }
                let u = tape.constant(Matrix::row_vector(y)).matmul(m.proj_t)?;
                m.obs_mean(zv, u)?
            }
        };
        let out = mean.value().data().to_vec();
        Ok(out)
    }

    /// Log-joint density `log p(y, z)` of a full sequence.
    pub fn log_joint(&self, z: &SoftStateSeq, y: &ObsSeries) -> Result<f64> {
        let tape = Tape::new();
        let m = self.bind_constants(&tape)?;
        let terms = m.log_joint(tape.constant(z.z.clone()), tape.constant(y.y.clone()))?;
        Ok(terms.total()?.item())
    }

    /// Ancestral simulation. Per step the generator draws `K` Gumbels then
    /// `N` standard normals.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R, t_len: usize) -> Result<(SoftStateSeq, ObsSeries)> {
        self.validate()?;
        if t_len == 0 {
            return Err(GdmError::InvalidArgument("T must be at least 1".into()));
        }
        let (k, n) = (self.k(), self.n());
        let tape = Tape::new();
        let m = self.bind_constants(&tape)?;
        let mut zs = Matrix::zeros(t_len, k);
        let mut ys = Matrix::zeros(t_len, n);
        let mut h = m.transition.initial_state(1);
        let mut z_prev: Option<Var> = None;
        let mut y_prev: Option<Var> = None;
        for t in 0..t_len {
            let g = sample_gumbel(rng, 1, k);
            let (z, mean) = match (z_prev, y_prev) {
                (Some(zp), Some(yp)) => {
                    let u = yp.matmul(m.proj_t)?;
                    let (logits, h_new) = m.transition.step(zp, u, h)?;
                    h = h_new;
                    let z = gs_relax(logits, &g, self.temperature)?;
                    (z, m.obs_mean(z, u)?)
                }
                _ => {
                    let z = gs_relax(m.prior_logits, &g, self.temperature)?;
                    (z, m.first_mean(z)?)
                }
            };
            let noise = Matrix::from_fn(1, n, |_, j| {
                let e: f64 = StandardNormal.sample(&mut *rng);
                e * self.obs_noise[(0, j)]
            });
            let y = mean.add(tape.constant(noise))?;
            zs.row_mut(t).copy_from_slice(z.value().data());
            ys.row_mut(t).copy_from_slice(y.value().data());
            // Detach so the tape does not grow a chain over the whole run.
            let (zv, yv) = (z.value().clone(), y.value().clone());
            z_prev = Some(tape.constant(zv));
            y_prev = Some(tape.constant(yv));
        }
        Ok((SoftStateSeq { z: zs }, ObsSeries::new(ys, None)?))
    }
}

impl Trainable for GdmParams {
    fn arrays(&self) -> Vec<Matrix> {
        let mut v = vec![self.prior_logits.clone(), self.obs_prior.clone(), self.proj.clone()];
        v.extend(self.dynamics.iter().cloned());
        v.push(self.offsets.clone());
        v.push(self.obs_noise.map(f64::ln));
        v.extend(self.transition.arrays());
        v
    }

    fn set_arrays(&mut self, cur: &mut ArrayCursor<'_>) -> Result<()> {
        self.prior_logits = cur.take(self.prior_logits.shape())?;
        self.obs_prior = cur.take(self.obs_prior.shape())?;
        self.proj = cur.take(self.proj.shape())?;
        for s in self.dynamics.iter_mut() {
            *s = cur.take(s.shape())?;
        }
        self.offsets = cur.take(self.offsets.shape())?;
        self.obs_noise = cur.take(self.obs_noise.shape())?.map(f64::exp);
        self.transition.set_arrays(cur)
    }
}

/// Centered principal directions as the rows of a `D x N` matrix, sorted by
/// decreasing variance, each with its largest-magnitude entry positive.
pub fn principal_directions(series: &[ObsSeries], d: usize) -> Result<Matrix> {
    let n = series[0].dim();
    let total: usize = series.iter().map(ObsSeries::len).sum();
    let mut mean = vec![0.0; n];
    for s in series {
        for t in 0..s.len() {
            for (m, v) in mean.iter_mut().zip(s.y.row(t)) {
                *m += v / total as f64;
            }
        }
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(n, n);
    for s in series {
        for t in 0..s.len() {
            let c: Vec<f64> = s.y.row(t).iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += c[i] * c[j] / total as f64;
                }
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Matrix::zeros(d, n);
    for (r, &idx) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            out[(r, j)] = sign * col[j];
        }
    }
    Ok(out)
}

/// Generative parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct TrackedGdm<'t> {
    pub prior_logits: Var<'t>,
    pub obs_prior: Var<'t>,
    /// `N x D`, i.e. `F^T`.
    pub proj_t: Var<'t>,
    /// `D x (K*N)`: `[S_1^T | ... | S_K^T]`.
    pub dyn_blocks: Var<'t>,
    /// `1 x (K*N)`: `[b_1 | ... | b_K]`.
    pub offset_row: Var<'t>,
    pub log_sigma: Var<'t>,
    pub transition: TrackedTransition<'t>,
    pub temperature: f64,
}

/// Separate terms of the log-joint.
#[derive(Debug, Clone, Copy)]
pub struct LogJointTerms<'t> {
    /// `sum_t log p(y_t | y_{t-1}, z_t)`.
    pub observation: Var<'t>,
    /// `log p(z_1) + sum_t log p(z_t | z_{t-1}, y_{t-1})`.
    pub states: Var<'t>,
}

impl<'t> LogJointTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.observation.add(self.states)
    }
}

impl<'t> TrackedGdm<'t> {
    /// Rows of `z` (`B x K`) and projected previous observations `u`
    /// (`B x D`) to conditional means (`B x N`).
    pub fn obs_mean(&self, z: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
        z.mix(u.matmul(self.dyn_blocks)?.add(self.offset_row)?)
    }

    pub fn first_mean(&self, z1: Var<'t>) -> Result<Var<'t>> {
        z1.matmul(self.obs_prior)
    }

    pub fn project(&self, y: Var<'t>) -> Result<Var<'t>> {
        y.matmul(self.proj_t)
    }

    /// Smoothed means for a whole sequence: row 0 is `z_1 . mu`, row `t` is
    /// the conditional mean given `z_t` and `y_{t-1}`.
    pub fn smoothed_means(&self, z: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let t_len = y.shape().0;
        let first = self.first_mean(z.row(0)?)?;
        if t_len == 1 {
            return Ok(first);
        }
        let u_prev = self.project(y.rows(0, t_len - 1)?)?;
        let rest = self.obs_mean(z.rows(1, t_len)?, u_prev)?;
        z.tape().vstack(&[first, rest])
    }

    /// Prior logits for every step: row 0 is `pi_1`, row `t` the transition
    /// logits from `(z_{t-1}, F y_{t-1})`.
    pub fn prior_logit_rows(&self, z: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let t_len = y.shape().0;
        if t_len == 1 {
            return Ok(self.prior_logits);
        }
        let u_prev = self.project(y.rows(0, t_len - 1)?)?;
        let trans = self.transition.sequence(z.rows(0, t_len - 1)?, u_prev)?;
        z.tape().vstack(&[self.prior_logits, trans])
    }

    pub fn log_joint(&self, z: Var<'t>, y: Var<'t>) -> Result<LogJointTerms<'t>> {
        self.log_joint_impl(z, None, y)
    }

    /// [`TrackedGdm::log_joint`] for a relaxed draw whose state densities are
    /// evaluated at the exact coordinate logarithms `log_z`.
    pub fn log_joint_relaxed(&self, z: Var<'t>, log_z: Var<'t>, y: Var<'t>) -> Result<LogJointTerms<'t>> {
        self.log_joint_impl(z, Some(log_z), y)
    }

    fn log_joint_impl(&self, z: Var<'t>, log_z: Option<Var<'t>>, y: Var<'t>) -> Result<LogJointTerms<'t>> {
        let (tz, k) = z.shape();
        let ty = y.shape().0;
        if tz != ty || tz == 0 {
            return Err(GdmError::Dimension(format!("log_joint: {tz} states vs {ty} observations")));
        }
        if k != self.prior_logits.shape().1 {
            return Err(GdmError::Dimension(format!("log_joint: z has {k} columns")));
        }
        let means = self.smoothed_means(z, y)?;
        let observation = y.gaussian_logpdf(means, self.log_sigma)?;
        let logits = self.prior_logit_rows(z, y)?;
        let states = match log_z {
            None => gs_log_density(z, logits, self.temperature)?,
            Some(lz) => gs_log_density_at_log(lz, logits, self.temperature)?,
        };
        Ok(LogJointTerms { observation, states })
    }
}
