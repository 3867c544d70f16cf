//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its value and the indices of its
//! parents, so node order is a topological order by construction. `backward`
//! walks the nodes once in reverse and never mutates the tape; calling it
//! twice yields identical gradients.
//!
//! Broadcasting is limited to a `1 x c` row, an `r x 1` column or a `1 x 1`
//! scalar against a full matrix in the elementwise binary ops.

use std::cell::{Ref, RefCell};

use super::matrix::Matrix;
use crate::error::{GdmError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    LogSumExpRows(usize),
    SoftmaxRows(usize, f64),
    SimplexFloor(usize, f64),
    SliceRows(usize, usize),
    VStack(Vec<usize>),
    HStack(Vec<usize>),
    Mix(usize, usize),
    GaussianLogPdf(usize, usize, usize),
    SquaredError(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Record of a forward computation. Single-threaded by construction
/// (interior mutability through `RefCell`).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.idx, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&self, value: Matrix) -> Var<'_> {
        let v = self.push(value, Op::Leaf);
        self.params.borrow_mut().push(v.idx);
        v
    }

    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    pub fn vstack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            Matrix::vstack(&refs)?
        };
        Ok(self.push(value, Op::VStack(parts.iter().map(|p| p.idx).collect())))
    }

    pub fn hstack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            Matrix::hstack(&refs)?
        };
        Ok(self.push(value, Op::HStack(parts.iter().map(|p| p.idx).collect())))
    }

    /// Gradients of a `1 x 1` loss with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let (r, c) = nodes[loss.idx].value.shape();
        if (r, c) != (1, 1) {
            return Err(GdmError::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate_reduced(&mut grads, *a, val(*a).shape(), &g);
                    accumulate_reduced(&mut grads, *b, val(*b).shape(), &g);
                }
                Op::Sub(a, b) => {
                    accumulate_reduced(&mut grads, *a, val(*a).shape(), &g);
                    accumulate_reduced(&mut grads, *b, val(*b).shape(), &g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |p, q| {
                        g[(p, q)] * bcast_get(val(*b), p, q)
                    });
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |p, q| {
                        g[(p, q)] * bcast_get(val(*a), p, q)
                    });
                    accumulate_reduced(&mut grads, *a, val(*a).shape(), &ga);
                    accumulate_reduced(&mut grads, *b, val(*b).shape(), &gb);
                }
                Op::Div(a, b) => {
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |p, q| {
                        g[(p, q)] / bcast_get(val(*b), p, q)
                    });
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |p, q| {
                        let bv = bcast_get(val(*b), p, q);
                        -g[(p, q)] * bcast_get(val(*a), p, q) / (bv * bv)
                    });
                    accumulate_reduced(&mut grads, *a, val(*a).shape(), &ga);
                    accumulate_reduced(&mut grads, *b, val(*b).shape(), &gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.scale(-1.0)),
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Offset(a) => accumulate(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(*b).transpose())?;
                    let gb = val(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Exp(a) => accumulate(&mut grads, *a, g.hadamard(&node.value)?),
                Op::Log(a) => {
                    let x = val(*a);
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |p, q| g[(p, q)] / x[(p, q)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |p, q| {
                        g[(p, q)] * (1.0 - y[(p, q)] * y[(p, q)])
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |p, q| {
                        g[(p, q)] * y[(p, q)] * (1.0 - y[(p, q)])
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)] / n));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |p, _| g[(p, 0)]));
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |_, q| g[(0, q)]));
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let out = &node.value;
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |p, q| {
                        g[(p, 0)] * (x[(p, q)] - out[(p, 0)]).exp()
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a, tau) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for p in 0..y.rows() {
                        let dot: f64 = g.row(p).iter().zip(y.row(p)).map(|(a, b)| a * b).sum();
                        for q in 0..y.cols() {
                            ga[(p, q)] = y[(p, q)] * (g[(p, q)] - dot) / tau;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SimplexFloor(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for p in 0..x.rows() {
                        let s: f64 = x.row(p).iter().map(|v| v.max(*eps)).sum();
                        let dot: f64 = g.row(p).iter().zip(y.row(p)).map(|(a, b)| a * b).sum();
                        for q in 0..x.cols() {
                            if x[(p, q)] > *eps {
                                ga[(p, q)] = (g[(p, q)] - dot) / s;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let parent = val(*a);
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(parent.rows(), parent.cols()));
                    for p in 0..g.rows() {
                        for (d, s) in slot.row_mut(start + p).iter_mut().zip(g.row(p)) {
                            *d += s;
                        }
                    }
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for &pidx in parts {
                        let n = val(pidx).rows();
                        accumulate(&mut grads, pidx, g.slice_rows(offset, offset + n));
                        offset += n;
                    }
                }
                Op::HStack(parts) => {
                    let mut offset = 0;
                    for &pidx in parts {
                        let n = val(pidx).cols();
                        let part = Matrix::from_fn(g.rows(), n, |p, q| g[(p, offset + q)]);
                        accumulate(&mut grads, pidx, part);
                        offset += n;
                    }
                }
                Op::Mix(z, blocks) => {
                    let zv = val(*z);
                    let bv = val(*blocks);
                    let k = zv.cols();
                    let n = g.cols();
                    let gz = Matrix::from_fn(zv.rows(), k, |p, j| {
                        (0..n).map(|q| g[(p, q)] * bv[(p, j * n + q)]).sum()
                    });
                    let gb = Matrix::from_fn(bv.rows(), bv.cols(), |p, c| {
                        g[(p, c % n)] * zv[(p, c / n)]
                    });
                    accumulate(&mut grads, *z, gz);
                    accumulate(&mut grads, *blocks, gb);
                }
                Op::GaussianLogPdf(x, mean, log_sigma) => {
                    let xv = val(*x);
                    let mv = val(*mean);
                    let ls = val(*log_sigma);
                    let s = g[(0, 0)];
                    let (r, c) = xv.shape();
                    let mut gx = Matrix::zeros(r, c);
                    let mut gls = Matrix::zeros(1, c);
                    for p in 0..r {
                        for q in 0..c {
                            let sigma = ls[(0, q)].exp();
                            let resid = xv[(p, q)] - mv[(p, q)];
                            gx[(p, q)] = -s * resid / (sigma * sigma);
                            let z = resid / sigma;
                            gls[(0, q)] += s * (z * z - 1.0);
                        }
                    }
                    accumulate(&mut grads, *mean, gx.scale(-1.0));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *log_sigma, gls);
                }
                Op::SquaredError(a, b) => {
                    let d = val(*a).sub(val(*b))?.scale(2.0 * g[(0, 0)]);
                    accumulate(&mut grads, *b, d.scale(-1.0));
                    accumulate(&mut grads, *a, d);
                }
            }
            grads[i] = Some(g);
        }

        let shapes = nodes[..=loss.idx].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

fn bcast_get(m: &Matrix, p: usize, q: usize) -> f64 {
    let i = if m.rows() == 1 { 0 } else { p };
    let j = if m.cols() == 1 { 0 } else { q };
    m[(i, j)]
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` down to `shape` along the broadcast axes before accumulating.
fn accumulate_reduced(grads: &mut [Option<Matrix>], idx: usize, shape: (usize, usize), g: &Matrix) {
    if shape == g.shape() {
        accumulate(grads, idx, g.clone());
        return;
    }
    let mut red = Matrix::zeros(shape.0, shape.1);
    for p in 0..g.rows() {
        for q in 0..g.cols() {
            let i = if shape.0 == 1 { 0 } else { p };
            let j = if shape.1 == 1 { 0 } else { q };
            red[(i, j)] += g[(p, q)];
        }
    }
    accumulate(grads, idx, red);
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    if (ar, ac) == (br, bc) {
        return Ok((ar, ac));
    }
    let fits = |small: (usize, usize), full: (usize, usize)| {
        small == (1, 1) || small == (1, full.1) || small == (full.0, 1)
    };
    if fits((br, bc), (ar, ac)) {
        Ok((ar, ac))
    } else if fits((ar, ac), (br, bc)) {
        Ok((br, bc))
    } else {
        Err(a.mismatch(op, b))
    }
}

fn broadcast_zip(op: &'static str, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    let (r, c) = broadcast_shape(op, a, b)?;
    Ok(Matrix::from_fn(r, c, |p, q| f(bcast_get(a, p, q), bcast_get(b, p, q))))
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Matrix {
        self.by_index(v.idx)
    }

    fn by_index(&self, idx: usize) -> Matrix {
        match self.grads.get(idx).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(idx).copied().unwrap_or((0, 0));
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> Vec<Matrix> {
        self.params.iter().map(|&i| self.by_index(i)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a `1 x 1` node (first entry otherwise).
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(self, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var<'t> {
        let v = f(&self.value());
        self.tape.push(v, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
        op: Op,
    ) -> Result<Var<'t>> {
        let v = f(&self.value(), &other.value())?;
        Ok(self.tape.push(v, op))
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| broadcast_zip("add", a, b, |x, y| x + y), Op::Add(self.idx, o.idx))
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| broadcast_zip("sub", a, b, |x, y| x - y), Op::Sub(self.idx, o.idx))
    }

    /// Elementwise product.
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| broadcast_zip("mul", a, b, |x, y| x * y), Op::Mul(self.idx, o.idx))
    }

    /// Elementwise quotient.
    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| broadcast_zip("div", a, b, |x, y| x / y), Op::Div(self.idx, o.idx))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|a| a.scale(-1.0), Op::Neg(self.idx))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|a| a.scale(s), Op::Scale(self.idx, s))
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v + c), Op::Offset(self.idx))
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, |a, b| a.matmul(b), Op::MatMul(self.idx, o.idx))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Matrix::transpose, Op::Transpose(self.idx))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|a| a.map(f64::exp), Op::Exp(self.idx))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(GdmError::NonPositiveLog { value, index });
            }
            x.map(f64::ln)
        };
        Ok(self.tape.push(v, Op::Log(self.idx)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|a| a.map(sigmoid), Op::Sigmoid(self.idx))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|a| Matrix::scalar(a.sum()), Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(|a| Matrix::scalar(a.sum() / a.len().max(1) as f64), Op::Mean(self.idx))
    }

    /// `r x c -> r x 1`, summing each row.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(
            |a| Matrix::from_fn(a.rows(), 1, |p, _| a.row(p).iter().sum()),
            Op::SumRows(self.idx),
        )
    }

    /// `r x c -> 1 x c`, summing each column.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(
            |a| Matrix::from_fn(1, a.cols(), |_, q| (0..a.rows()).map(|p| a[(p, q)]).sum()),
            Op::SumCols(self.idx),
        )
    }

    /// Max-shifted log-sum-exp of each row, `r x c -> r x 1`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        self.unary(
            |a| Matrix::from_fn(a.rows(), 1, |p, _| logsumexp(a.row(p))),
            Op::LogSumExpRows(self.idx),
        )
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(self, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) {
            return Err(GdmError::InvalidTemperature(tau));
        }
        Ok(self.unary(
            |a| {
                let mut out = a.clone();
                for p in 0..a.rows() {
                    softmax_in_place(out.row_mut(p), tau);
                }
                out
            },
            Op::SoftmaxRows(self.idx, tau),
        ))
    }

    /// Clamps each entry to at least `eps` and renormalizes rows to sum 1.
    pub fn simplex_floor(self, eps: f64) -> Var<'t> {
        self.unary(
            |a| {
                let mut out = a.map(|v| v.max(eps));
                for p in 0..out.rows() {
                    let s: f64 = out.row(p).iter().sum();
                    out.row_mut(p).iter_mut().for_each(|v| *v /= s);
                }
                out
            },
            Op::SimplexFloor(self.idx, eps),
        )
    }

    /// Rows `start..end`.
    pub fn rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let r = self.shape().0;
        if start > end || end > r {
            return Err(GdmError::Dimension(format!(
                "row range {start}..{end} out of bounds for {r} rows"
            )));
        }
        Ok(self.unary(|a| a.slice_rows(start, end), Op::SliceRows(self.idx, start)))
    }

    pub fn row(self, i: usize) -> Result<Var<'t>> {
        self.rows(i, i + 1)
    }

    /// Convex mixture of per-state row blocks: with `self` of shape `B x K`
    /// and `blocks` of shape `B x (K*n)`, row `b` of the result is
    /// `sum_k self[b,k] * blocks[b, k*n..(k+1)*n]`.
    pub fn mix(self, blocks: Var<'t>) -> Result<Var<'t>> {
        let (b, k) = self.shape();
        let (br, bc) = blocks.shape();
        if br != b || k == 0 || bc % k != 0 {
            return Err(self.value().mismatch("mix", &blocks.value()));
        }
        let n = bc / k;
        self.binary(
            blocks,
            |z, m| {
                Ok(Matrix::from_fn(b, n, |p, q| {
                    (0..k).map(|j| z[(p, j)] * m[(p, j * n + q)]).sum()
                }))
            },
            Op::Mix(self.idx, blocks.idx),
        )
    }

    /// Sum over rows of the diagonal-Gaussian log-density of `self` around
    /// `mean` with per-coordinate standard deviations `exp(log_sigma)`
    /// (`log_sigma` is `1 x c`).
    pub fn gaussian_logpdf(self, mean: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let m = mean.value();
            let ls = log_sigma.value();
            if x.shape() != m.shape() {
                return Err(x.mismatch("gaussian_logpdf", &m));
            }
            if ls.shape() != (1, x.cols()) {
                return Err(x.mismatch("gaussian_logpdf(log_sigma)", &ls));
            }
            let mut total = 0.0;
            for p in 0..x.rows() {
                for q in 0..x.cols() {
                    let z = (x[(p, q)] - m[(p, q)]) / ls[(0, q)].exp();
                    total += -0.5 * LN_2PI - ls[(0, q)] - 0.5 * z * z;
                }
            }
            Matrix::scalar(total)
        };
        Ok(self.tape.push(v, Op::GaussianLogPdf(self.idx, mean.idx, log_sigma.idx)))
    }

    /// `sum((self - other)^2)`.
    pub fn squared_error(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            o,
            |a, b| Ok(Matrix::scalar(a.sub(b)?.data().iter().map(|d| d * d).sum())),
            Op::SquaredError(self.idx, o.idx),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place `softmax(x / tau)` with max-shift.
pub fn softmax_in_place(xs: &mut [f64], tau: f64) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = ((*x - m) / tau).exp();
        s += *x;
    }
    xs.iter_mut().for_each(|x| *x /= s);
}
