//! Small recurrent and feed-forward blocks used by the recurrent transition
//! and the bidirectional posterior. Inputs are batches of row vectors.

use rand::Rng;

use crate::diffmath::{ArrayCursor, Leaves, Matrix, Trainable, Var};
use crate::error::Result;

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Gated recurrent unit:
/// `r = s(x Wxr + h Whr + br)`, `u = s(x Wxu + h Whu + bu)`,
/// `n = tanh(x Wxn + bxn + r * (h Whn + bhn))`, `h' = (1 - u) * n + u * h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_xr: Matrix,
    pub w_xu: Matrix,
    pub w_xn: Matrix,
    pub w_hr: Matrix,
    pub w_hu: Matrix,
    pub w_hn: Matrix,
    pub b_r: Matrix,
    pub b_u: Matrix,
    pub b_xn: Matrix,
    pub b_hn: Matrix,
}

impl GruCell {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        Self {
            w_xr: uniform_init(rng, input, hidden, b),
            w_xu: uniform_init(rng, input, hidden, b),
            w_xn: uniform_init(rng, input, hidden, b),
            w_hr: uniform_init(rng, hidden, hidden, b),
            w_hu: uniform_init(rng, hidden, hidden, b),
            w_hn: uniform_init(rng, hidden, hidden, b),
            b_r: uniform_init(rng, 1, hidden, b),
            b_u: uniform_init(rng, 1, hidden, b),
            b_xn: uniform_init(rng, 1, hidden, b),
            b_hn: uniform_init(rng, 1, hidden, b),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_xr.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hr.rows()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Matrix)> {
        [
            ("w_xr", &self.w_xr),
            ("w_xu", &self.w_xu),
            ("w_xn", &self.w_xn),
            ("w_hr", &self.w_hr),
            ("w_hu", &self.w_hu),
            ("w_hn", &self.w_hn),
            ("b_r", &self.b_r),
            ("b_u", &self.b_u),
            ("b_xn", &self.b_xn),
            ("b_hn", &self.b_hn),
        ]
        .into_iter()
        .map(|(n, m)| (format!("{prefix}.{n}"), m.clone()))
        .collect()
    }

    pub fn from_named(get: &mut dyn FnMut(&str) -> Result<Matrix>, prefix: &str) -> Result<Self> {
        let mut g = |n: &str| get(&format!("{prefix}.{n}"));
        Ok(GruCell {
            w_xr: g("w_xr")?,
            w_xu: g("w_xu")?,
            w_xn: g("w_xn")?,
            w_hr: g("w_hr")?,
            w_hu: g("w_hu")?,
            w_hn: g("w_hn")?,
            b_r: g("b_r")?,
            b_u: g("b_u")?,
            b_xn: g("b_xn")?,
            b_hn: g("b_hn")?,
        })
    }

    pub fn bind<'t>(&self, leaves: &mut Leaves<'_, 't>) -> Result<TrackedGru<'t>> {
        Ok(TrackedGru {
            w_xr: leaves.next()?,
            w_xu: leaves.next()?,
            w_xn: leaves.next()?,
            w_hr: leaves.next()?,
            w_hu: leaves.next()?,
            w_hn: leaves.next()?,
            b_r: leaves.next()?,
            b_u: leaves.next()?,
            b_xn: leaves.next()?,
            b_hn: leaves.next()?,
            hidden: self.hidden_size(),
        })
    }
}

impl Trainable for GruCell {
    fn arrays(&self) -> Vec<Matrix> {
        self.named("").into_iter().map(|(_, m)| m).collect()
    }

    fn set_arrays(&mut self, cur: &mut ArrayCursor<'_>) -> Result<()> {
        for m in [
            &mut self.w_xr,
            &mut self.w_xu,
            &mut self.w_xn,
            &mut self.w_hr,
            &mut self.w_hu,
            &mut self.w_hn,
            &mut self.b_r,
            &mut self.b_u,
            &mut self.b_xn,
            &mut self.b_hn,
        ] {
            *m = cur.take(m.shape())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackedGru<'t> {
    w_xr: Var<'t>,
    w_xu: Var<'t>,
    w_xn: Var<'t>,
    w_hr: Var<'t>,
    w_hu: Var<'t>,
    w_hn: Var<'t>,
    b_r: Var<'t>,
    b_u: Var<'t>,
    b_xn: Var<'t>,
    b_hn: Var<'t>,
    hidden: usize,
}

impl<'t> TrackedGru<'t> {
    pub fn zero_state(&self, batch: usize) -> Var<'t> {
        self.w_hr.tape().constant(Matrix::zeros(batch, self.hidden))
    }

    pub fn step(&self, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let r = x.matmul(self.w_xr)?.add(h.matmul(self.w_hr)?)?.add(self.b_r)?.sigmoid();
        let u = x.matmul(self.w_xu)?.add(h.matmul(self.w_hu)?)?.add(self.b_u)?.sigmoid();
        let hn = h.matmul(self.w_hn)?.add(self.b_hn)?;
        let n = x.matmul(self.w_xn)?.add(self.b_xn)?.add(r.mul(hn)?)?.tanh();
        // (1 - u) * n + u * h  ==  n + u * (h - n)
        n.add(u.mul(h.sub(n)?)?)
    }

    /// Runs over the rows of `xs` (`T x input`) starting from `h0`, returning
    /// the `T` successive hidden states stacked as rows.
    pub fn scan(&self, xs: Var<'t>, h0: Var<'t>) -> Result<Var<'t>> {
        let t = xs.shape().0;
        let mut h = h0;
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            h = self.step(xs.row(i)?, h)?;
            out.push(h);
        }
        xs.tape().vstack(&out)
    }

    /// Like [`TrackedGru::scan`] but consumes the rows last to first; row `t`
    /// of the result has absorbed inputs `t..T`.
    pub fn scan_rev(&self, xs: Var<'t>, h0: Var<'t>) -> Result<Var<'t>> {
        let t = xs.shape().0;
        let mut h = h0;
        let mut out = Vec::with_capacity(t);
        for i in (0..t).rev() {
            h = self.step(xs.row(i)?, h)?;
            out.push(h);
        }
        out.reverse();
        xs.tape().vstack(&out)
    }
}

/// One-hidden-layer tanh network.
#[derive(Debug, Clone, PartialEq)]
pub struct Fnn {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Fnn {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, width: usize, output: usize) -> Self {
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (width as f64).sqrt();
        Self {
            w1: uniform_init(rng, input, width, b1),
            b1: uniform_init(rng, 1, width, b1),
            w2: uniform_init(rng, width, output, b2),
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w1.rows()
    }

    pub fn width(&self) -> usize {
        self.w1.cols()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Matrix)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), self.b2.clone()),
        ]
    }

    pub fn from_named(get: &mut dyn FnMut(&str) -> Result<Matrix>, prefix: &str) -> Result<Self> {
        Ok(Fnn {
            w1: get(&format!("{prefix}.w1"))?,
            b1: get(&format!("{prefix}.b1"))?,
            w2: get(&format!("{prefix}.w2"))?,
            b2: get(&format!("{prefix}.b2"))?,
        })
    }

    pub fn bind<'t>(&self, leaves: &mut Leaves<'_, 't>) -> Result<TrackedFnn<'t>> {
        Ok(TrackedFnn {
            w1: leaves.next()?,
            b1: leaves.next()?,
            w2: leaves.next()?,
            b2: leaves.next()?,
        })
    }
}

impl Trainable for Fnn {
    fn arrays(&self) -> Vec<Matrix> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    fn set_arrays(&mut self, cur: &mut ArrayCursor<'_>) -> Result<()> {
        for m in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            *m = cur.take(m.shape())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackedFnn<'t> {
    pub(crate) w1: Var<'t>,
    pub(crate) b1: Var<'t>,
    pub(crate) w2: Var<'t>,
    pub(crate) b2: Var<'t>,
}

impl<'t> TrackedFnn<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.matmul(self.w1)?.add(self.b1)?.tanh();
        h.matmul(self.w2)?.add(self.b2)
    }
}
