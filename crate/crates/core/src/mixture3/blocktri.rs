//! Gaussians over a `T x D` trajectory with block-tridiagonal precision.
//!
//! Built from pairwise factors `N(x_{t+1} | A_t x_t + b_t, Q_t)` and node
//! potentials `N(x_t | m_t, R_t)`. Solves and sampling go through a block
//! Cholesky factor `J = L L^T` with `L` lower block-bidiagonal, so every
//! operation costs `O(T D^3)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffmath::Matrix;
use crate::error::{GdmError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `N(x_{t+1} | a x_t + b, diag q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseFactor {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub q: Vec<f64>,
}

/// `N(x_t | m, diag r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePotential {
    pub m: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTriGaussian {
    /// `J_tt`, `T` blocks of `D x D`.
    pub diag: Vec<Matrix>,
    /// `J_{t,t+1}`, `T-1` blocks.
    pub upper: Vec<Matrix>,
    /// Potential, `T x D`.
    pub h: Matrix,
}

/// Block Cholesky factor: `L_tt` lower triangular and `L_{t+1,t}`.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    diag: Vec<DMatrix<f64>>,
    sub: Vec<DMatrix<f64>>,
}

fn positive(values: &[f64], what: &str, t: usize) -> Result<()> {
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(GdmError::NotPositiveDefinite(format!("{what} at step {} has variance {v}", t + 1)));
    }
    Ok(())
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    m.to_nalgebra()
}

impl BlockTriGaussian {
    /// Accumulates the precision and potential of the product of factors.
    /// `factors` has `T-1` entries and `nodes` `T`.
    pub fn assemble(factors: &[PairwiseFactor], nodes: &[NodePotential]) -> Result<Self> {
        let t_len = nodes.len();
        if t_len == 0 {
            return Err(GdmError::InvalidArgument("block-tridiagonal Gaussian needs T >= 1".into()));
        }
        if factors.len() + 1 != t_len {
            return Err(GdmError::Dimension(format!(
                "{} pairwise factors for {t_len} nodes",
                factors.len()
            )));
        }
        let d = nodes[0].m.len();
        let mut diag = Vec::with_capacity(t_len);
        let mut h = Matrix::zeros(t_len, d);
        for (t, node) in nodes.iter().enumerate() {
            if node.m.len() != d || node.r.len() != d {
                return Err(GdmError::Dimension(format!("node {} is not {d}-dimensional", t + 1)));
            }
            positive(&node.r, "node potential", t)?;
            let mut j = Matrix::zeros(d, d);
            for i in 0..d {
                j[(i, i)] = 1.0 / node.r[i];
                h[(t, i)] = node.m[i] / node.r[i];
            }
            diag.push(j);
        }
        let mut upper = Vec::with_capacity(t_len.saturating_sub(1));
        for (t, f) in factors.iter().enumerate() {
            if f.a.shape() != (d, d) || f.b.len() != d || f.q.len() != d {
                return Err(GdmError::Dimension(format!("pairwise factor {} is not {d}-dimensional", t + 1)));
            }
            positive(&f.q, "transition", t)?;
            // A^T Q^-1
            let atqi = Matrix::from_fn(d, d, |i, j| f.a[(j, i)] / f.q[j]);
            diag[t].add_assign(&atqi.matmul(&f.a)?);
            for i in 0..d {
                diag[t + 1][(i, i)] += 1.0 / f.q[i];
                h[(t + 1, i)] += f.b[i] / f.q[i];
            }
            let atqib = atqi.matmul(&Matrix::col_vector(&f.b))?;
            for i in 0..d {
                h[(t, i)] -= atqib[(i, 0)];
            }
            upper.push(atqi.scale(-1.0));
        }
        Ok(Self { diag, upper, h })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.h.cols()
    }

    /// Dense `(T D) x (T D)` precision, for checks on small instances.
    pub fn dense_precision(&self) -> Matrix {
        let (t_len, d) = (self.len(), self.dim());
        let mut j = Matrix::zeros(t_len * d, t_len * d);
        for t in 0..t_len {
            for a in 0..d {
                for b in 0..d {
                    j[(t * d + a, t * d + b)] = self.diag[t][(a, b)];
                    if t + 1 < t_len {
                        j[(t * d + a, (t + 1) * d + b)] = self.upper[t][(a, b)];
                        j[((t + 1) * d + b, t * d + a)] = self.upper[t][(a, b)];
                    }
                }
            }
        }
        j
    }

    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let mut diag: Vec<DMatrix<f64>> = Vec::with_capacity(self.len());
        let mut sub = Vec::with_capacity(self.len().saturating_sub(1));
        for t in 0..self.len() {
            let mut s = to_na(&self.diag[t]);
            if t > 0 {
                // L_{t,t-1} = (L_{t-1,t-1}^-1 J_{t-1,t})^T
                let l_prev = &diag[t - 1];
                let x = l_prev
                    .solve_lower_triangular(&to_na(&self.upper[t - 1]))
                    .ok_or_else(|| GdmError::NotPositiveDefinite(format!("singular factor at step {t}")))?;
                let l_sub = x.transpose();
                s -= &l_sub * l_sub.transpose();
                sub.push(l_sub);
            }
            let chol = nalgebra::Cholesky::new(s).ok_or_else(|| {
                GdmError::NotPositiveDefinite(format!("Cholesky failed at block {}", t + 1))
            })?;
            diag.push(chol.l());
        }
        Ok(BlockCholesky { diag, sub })
    }

    /// `mu = J^-1 h`.
    pub fn mean(&self) -> Result<Matrix> {
        let l = self.cholesky()?;
        l.solve(&self.h)
    }

    /// Quadratic form `v^T J v` for a `T x D` matrix `v`.
    pub fn quadratic(&self, v: &Matrix) -> Result<f64> {
        if v.shape() != self.h.shape() {
            return Err(v.mismatch("quadratic", &self.h));
        }
        let d = self.dim();
        let mut acc = 0.0;
        for t in 0..self.len() {
            for a in 0..d {
                for b in 0..d {
                    acc += v[(t, a)] * self.diag[t][(a, b)] * v[(t, b)];
                    if t + 1 < self.len() {
                        acc += 2.0 * v[(t, a)] * self.upper[t][(a, b)] * v[(t + 1, b)];
                    }
                }
            }
        }
        Ok(acc)
    }

    /// Draws `x = mu + L^-T eta` with `eta ~ N(0, I)` filled row-major from
    /// `rng`. Returns the sample, the mean and `log q(x)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Matrix, Matrix, f64)> {
        let eta = Matrix::from_fn(self.len(), self.dim(), |_, _| StandardNormal.sample(rng));
        self.sample_with_noise(&eta)
    }

    pub fn sample_with_noise(&self, eta: &Matrix) -> Result<(Matrix, Matrix, f64)> {
        if eta.shape() != self.h.shape() {
            return Err(eta.mismatch("sample_with_noise", &self.h));
        }
        let l = self.cholesky()?;
        let mean = l.solve(&self.h)?;
        let dev = l.solve_upper(eta)?;
        let x = mean.add(&dev)?;
        let sq: f64 = eta.data().iter().map(|e| e * e).sum();
        let n = (self.len() * self.dim()) as f64;
        let log_q = -0.5 * n * LN_2PI + 0.5 * l.log_det() - 0.5 * sq;
        Ok((x, mean, log_q))
    }

    /// `log N(x; J^-1 h, J^-1)`.
    pub fn log_density(&self, x: &Matrix) -> Result<f64> {
        let l = self.cholesky()?;
        let mean = l.solve(&self.h)?;
        let q = self.quadratic(&x.sub(&mean)?)?;
        let n = (self.len() * self.dim()) as f64;
        Ok(-0.5 * n * LN_2PI + 0.5 * l.log_det() - 0.5 * q)
    }
}

impl BlockCholesky {
    /// `log |J|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.diag.iter().map(|l| l.diagonal().iter().map(|v| v.ln()).sum::<f64>()).sum::<f64>()
    }

    fn rows(m: &Matrix) -> Vec<DVector<f64>> {
        (0..m.rows()).map(|t| DVector::from_row_slice(m.row(t))).collect()
    }

    fn pack(vs: &[DVector<f64>], d: usize) -> Matrix {
        Matrix::from_fn(vs.len(), d, |t, j| vs[t][j])
    }

    fn fail(t: usize) -> GdmError {
        GdmError::NotPositiveDefinite(format!("triangular solve failed at block {}", t + 1))
    }

    /// Solves `L w = b`.
    pub fn solve_lower(&self, b: &Matrix) -> Result<Matrix> {
        let rhs = Self::rows(b);
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(rhs.len());
        for (t, r) in rhs.iter().enumerate() {
            let r = if t > 0 { r - &self.sub[t - 1] * &out[t - 1] } else { r.clone() };
            out.push(self.diag[t].solve_lower_triangular(&r).ok_or_else(|| Self::fail(t))?);
        }
        Ok(Self::pack(&out, b.cols()))
    }

    /// Solves `L^T x = w`.
    pub fn solve_upper(&self, w: &Matrix) -> Result<Matrix> {
        let rhs = Self::rows(w);
        let t_len = rhs.len();
        let mut out = vec![DVector::zeros(w.cols()); t_len];
        for t in (0..t_len).rev() {
            let r = if t + 1 < t_len {
                &rhs[t] - self.sub[t].transpose() * &out[t + 1]
            } else {
                rhs[t].clone()
            };
            out[t] = self.diag[t].tr_solve_lower_triangular(&r).ok_or_else(|| Self::fail(t))?;
        }
        Ok(Self::pack(&out, w.cols()))
    }

    /// Solves `J x = b`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        self.solve_upper(&self.solve_lower(b)?)
    }
}
