//! Amortized posteriors `q(z_{1:T} | y_{1:T})` over relaxed states.
//!
//! Every family produces per-step logits `pi'_t` and is sampled
//! sequentially: `z_t ~ GS(pi'_t, tau)`. The learnable `pi'_1` is added to
//! the first step's logits; the previous-state input is zero there.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffmath::{ArrayCursor, Leaves, Matrix, Tape, Trainable, Var};
use crate::error::{GdmError, Result};
use crate::gumbel::{gs_log_density_at_log, gs_relax_with_log, sample_gumbel};
use crate::model::nn::{Fnn, GruCell, TrackedFnn, TrackedGru};
use crate::model::{ObsSeries, SoftStateSeq, Variant};

pub const DEFAULT_POSTERIOR_HIDDEN: usize = 16;
pub const DEFAULT_POSTERIOR_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorFamily {
    /// `pi'_t = W y_t + b`; `W` is `K x N`, `b` is `1 x K`.
    Linear { weights: Matrix, bias: Matrix },
    /// `pi'_t = W y_t + B z_{t-1} + b`; `B` is `K x K`.
    StickyLinear {
        weights: Matrix,
        bias: Matrix,
        recurrence: Matrix,
    },
    /// `e_{1:T} = BiGRU(y_{1:T})`, `pi'_t = FNN([z_{t-1}, e_t])`.
    BiRecurrent {
        forward: GruCell,
        backward: GruCell,
        fnn: Fnn,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    /// `1 x K`, the learnable `pi'_1`.
    pub prior_logits: Matrix,
    pub family: PosteriorFamily,
    pub temperature: f64,
}

impl PosteriorParams {
    /// Small random weights, zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, variant: Variant, k: usize, n: usize, temperature: f64) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut w = |rows, cols| Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut *rng));
        let family = match variant {
            Variant::Linear => PosteriorFamily::Linear {
                weights: w(k, n),
                bias: Matrix::zeros(1, k),
            },
            Variant::StickyLinear => PosteriorFamily::StickyLinear {
                weights: w(k, n),
                bias: Matrix::zeros(1, k),
                recurrence: w(k, k),
            },
            Variant::Recurrent => {
                let h = DEFAULT_POSTERIOR_HIDDEN;
                let forward = GruCell::init(rng, n, h);
                let backward = GruCell::init(rng, n, h);
                let fnn = Fnn::init(rng, k + 2 * h, DEFAULT_POSTERIOR_WIDTH, k);
                PosteriorFamily::BiRecurrent { forward, backward, fnn }
            }
        };
        Self {
            prior_logits: Matrix::zeros(1, k),
            family,
            temperature,
        }
    }

    pub fn k(&self) -> usize {
        self.prior_logits.cols()
    }

    /// Observation dimension the network reads.
    pub fn n(&self) -> usize {
        match &self.family {
            PosteriorFamily::Linear { weights, .. } | PosteriorFamily::StickyLinear { weights, .. } => weights.cols(),
            PosteriorFamily::BiRecurrent { forward, .. } => forward.input_size(),
        }
    }

    /// The generative variant this posterior pairs with.
    pub fn variant(&self) -> Variant {
        match self.family {
            PosteriorFamily::Linear { .. } => Variant::Linear,
            PosteriorFamily::StickyLinear { .. } => Variant::StickyLinear,
            PosteriorFamily::BiRecurrent { .. } => Variant::Recurrent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, n) = (self.k(), self.n());
        if self.prior_logits.rows() != 1 || k == 0 {
            return Err(GdmError::Dimension(format!(
                "posterior prior logits are {:?}, expected 1xK",
                self.prior_logits.shape()
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(GdmError::InvalidTemperature(self.temperature));
        }
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Err(GdmError::Dimension(format!("posterior {what} is {got:?}, expected {want:?}")))
        };
        match &self.family {
            PosteriorFamily::Linear { weights, bias } => {
                if weights.shape() != (k, n) {
                    return bad("weights", weights.shape(), (k, n));
                }
                if bias.shape() != (1, k) {
                    return bad("bias", bias.shape(), (1, k));
                }
            }
            PosteriorFamily::StickyLinear {
                weights,
                bias,
                recurrence,
            } => {
                if weights.shape() != (k, n) {
                    return bad("weights", weights.shape(), (k, n));
                }
                if bias.shape() != (1, k) {
                    return bad("bias", bias.shape(), (1, k));
                }
                if recurrence.shape() != (k, k) {
                    return bad("recurrence", recurrence.shape(), (k, k));
                }
            }
            PosteriorFamily::BiRecurrent { forward, backward, fnn } => {
                let h = forward.hidden_size();
                if backward.input_size() != n || backward.hidden_size() != h {
                    return Err(GdmError::Dimension("forward and backward GRUs differ in shape".into()));
                }
                if fnn.input_size() != k + 2 * h || fnn.w2.cols() != k {
                    return Err(GdmError::Dimension(format!(
                        "posterior FNN maps {} -> {}, expected {} -> {k}",
                        fnn.input_size(),
                        fnn.w2.cols(),
                        k + 2 * h
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let mut v = vec![(format!("{prefix}.prior_logits"), self.prior_logits.clone())];
        match &self.family {
            PosteriorFamily::Linear { weights, bias } => {
                v.push((format!("{prefix}.weights"), weights.clone()));
                v.push((format!("{prefix}.bias"), bias.clone()));
            }
            PosteriorFamily::StickyLinear {
                weights,
                bias,
                recurrence,
            } => {
                v.push((format!("{prefix}.weights"), weights.clone()));
                v.push((format!("{prefix}.bias"), bias.clone()));
                v.push((format!("{prefix}.recurrence"), recurrence.clone()));
            }
            PosteriorFamily::BiRecurrent { forward, backward, fnn } => {
                v.extend(forward.named(&format!("{prefix}.forward")));
                v.extend(backward.named(&format!("{prefix}.backward")));
                v.extend(fnn.named(&format!("{prefix}.fnn")));
            }
        }
        v
    }

    pub fn bind<'t>(&self, leaves: &mut Leaves<'_, 't>) -> Result<TrackedPosterior<'t>> {
        let prior_logits = leaves.next()?;
        let family = match &self.family {
            PosteriorFamily::Linear { .. } => {
                let w = leaves.next()?;
                let bias = leaves.next()?;
                TrackedFamily::Linear { w_t: w.t(), bias }
            }
            PosteriorFamily::StickyLinear { .. } => {
                let w = leaves.next()?;
                let bias = leaves.next()?;
                let b = leaves.next()?;
                TrackedFamily::Sticky {
                    w_t: w.t(),
                    bias,
                    rec_t: b.t(),
                }
            }
            PosteriorFamily::BiRecurrent { forward, backward, fnn } => TrackedFamily::BiRecurrent {
                forward: forward.bind(leaves)?,
                backward: backward.bind(leaves)?,
                fnn: fnn.bind(leaves)?,
            },
        };
        Ok(TrackedPosterior {
            prior_logits,
            family,
            temperature: self.temperature,
            k: self.k(),
        })
    }

    pub fn bind_constants<'t>(&self, tape: &'t Tape) -> Result<TrackedPosterior<'t>> {
        let vars = self.constants(tape);
        let mut leaves = Leaves::new(&vars);
        let out = self.bind(&mut leaves)?;
        leaves.finish()?;
        Ok(out)
    }

    fn check_series(&self, y: &ObsSeries) -> Result<()> {
        if y.dim() != self.n() {
            return Err(GdmError::Dimension(format!(
                "series has dimension {}, posterior expects {}",
                y.dim(),
                self.n()
            )));
        }
        if y.is_empty() {
            return Err(GdmError::InvalidArgument("empty series".into()));
        }
        Ok(())
    }
}

impl Trainable for PosteriorParams {
    fn arrays(&self) -> Vec<Matrix> {
        self.named("").into_iter().map(|(_, m)| m).collect()
    }

    fn set_arrays(&mut self, cur: &mut ArrayCursor<'_>) -> Result<()> {
        self.prior_logits = cur.take(self.prior_logits.shape())?;
        match &mut self.family {
            PosteriorFamily::Linear { weights, bias } => {
                *weights = cur.take(weights.shape())?;
                *bias = cur.take(bias.shape())?;
            }
            PosteriorFamily::StickyLinear {
                weights,
                bias,
                recurrence,
            } => {
                *weights = cur.take(weights.shape())?;
                *bias = cur.take(bias.shape())?;
                *recurrence = cur.take(recurrence.shape())?;
            }
            PosteriorFamily::BiRecurrent { forward, backward, fnn } => {
                forward.set_arrays(cur)?;
                backward.set_arrays(cur)?;
                fnn.set_arrays(cur)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum TrackedFamily<'t> {
    Linear {
        w_t: Var<'t>,
        bias: Var<'t>,
    },
    Sticky {
        w_t: Var<'t>,
        bias: Var<'t>,
        rec_t: Var<'t>,
    },
    BiRecurrent {
        forward: TrackedGru<'t>,
        backward: TrackedGru<'t>,
        fnn: TrackedFnn<'t>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct TrackedPosterior<'t> {
    pub prior_logits: Var<'t>,
    family: TrackedFamily<'t>,
    pub temperature: f64,
    k: usize,
}

/// One reparameterized posterior draw on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorDraw<'t> {
    /// `T x K` relaxed states.
    pub z: Var<'t>,
    /// `T x K` exact `log z` before flooring.
    pub log_z: Var<'t>,
    /// `T x K` logits `pi'_t` the states were drawn from.
    pub logits: Var<'t>,
    /// `sum_t log GS(z_t; pi'_t, tau)`.
    pub log_q: Var<'t>,
}

impl<'t> TrackedPosterior<'t> {
    /// Draws `z_{1:T}` for observations `y` (`T x N`) from the given
    /// Gumbel noise (`T x K`).
    pub fn sample(&self, y: Var<'t>, gumbels: &Matrix) -> Result<PosteriorDraw<'t>> {
        let t_len = y.shape().0;
        if gumbels.shape() != (t_len, self.k) {
            return Err(GdmError::Dimension(format!(
                "posterior noise is {:?}, expected ({t_len}, {})",
                gumbels.shape(),
                self.k
            )));
        }
        let tape = y.tape();
        let tau = self.temperature;
        let with_prior = |pre: Var<'t>| -> Result<Var<'t>> {
            let first = pre.row(0)?.add(self.prior_logits)?;
            if t_len == 1 {
                Ok(first)
            } else {
                tape.vstack(&[first, pre.rows(1, t_len)?])
            }
        };
        let (z, log_z, logits) = match self.family {
            TrackedFamily::Linear { w_t, bias } => {
                let logits = with_prior(y.matmul(w_t)?.add(bias)?)?;
                let (z, log_z) = gs_relax_with_log(logits, gumbels, tau)?;
                (z, log_z, logits)
            }
            TrackedFamily::Sticky { w_t, bias, rec_t } => {
                let pre = y.matmul(w_t)?.add(bias)?;
                self.sequential(pre, gumbels, |z_prev, pre_t| match z_prev {
                    None => pre_t.add(self.prior_logits),
                    Some(zp) => pre_t.add(zp.matmul(rec_t)?),
                })?
            }
            TrackedFamily::BiRecurrent { forward, backward, fnn } => {
                let ef = forward.scan(y, forward.zero_state(1))?;
                let eb = backward.scan_rev(y, backward.zero_state(1))?;
                let e = tape.hstack(&[ef, eb])?;
                let width = e.shape().1;
                let w1_z = fnn.w1.rows(0, self.k)?;
                let w1_e = fnn.w1.rows(self.k, self.k + width)?;
                let pre = e.matmul(w1_e)?.add(fnn.b1)?;
                self.sequential(pre, gumbels, |z_prev, pre_t| {
                    let hidden = match z_prev {
                        None => pre_t,
                        Some(zp) => pre_t.add(zp.matmul(w1_z)?)?,
                    };
                    let out = hidden.tanh().matmul(fnn.w2)?.add(fnn.b2)?;
                    if z_prev.is_none() {
                        out.add(self.prior_logits)
                    } else {
                        Ok(out)
                    }
                })?
            }
        };
        let log_q = gs_log_density_at_log(log_z, logits, tau)?;
        Ok(PosteriorDraw { z, log_z, logits, log_q })
    }

    /// Row-by-row sampling where step `t`'s logits depend on `z_{t-1}`.
    fn sequential(
        &self,
        pre: Var<'t>,
        gumbels: &Matrix,
        logits_at: impl Fn(Option<Var<'t>>, Var<'t>) -> Result<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let t_len = pre.shape().0;
        let mut zs = Vec::with_capacity(t_len);
        let mut log_zs = Vec::with_capacity(t_len);
        let mut ls = Vec::with_capacity(t_len);
        let mut z_prev = None;
        for t in 0..t_len {
            let l = logits_at(z_prev, pre.row(t)?)?;
            let (z, log_z) = gs_relax_with_log(l, &gumbels.row_matrix(t), self.temperature)?;
            zs.push(z);
            log_zs.push(log_z);
            ls.push(l);
            z_prev = Some(z);
        }
        let tape = pre.tape();
        Ok((tape.vstack(&zs)?, tape.vstack(&log_zs)?, tape.vstack(&ls)?))
    }
}

/// Samples `z_{1:T}` and returns it with `log q(z_{1:T})`.
pub fn posterior_sample<R: Rng + ?Sized>(
    post: &PosteriorParams,
    y: &ObsSeries,
    rng: &mut R,
) -> Result<(SoftStateSeq, f64)> {
    post.validate()?;
    post.check_series(y)?;
    let gumbels = sample_gumbel(rng, y.len(), post.k());
    let tape = Tape::new();
    let q = post.bind_constants(&tape)?;
    let draw = q.sample(tape.constant(y.y.clone()), &gumbels)?;
    let z = draw.z.value().clone();
    let log_q = draw.log_q.item();
    Ok((SoftStateSeq { z }, log_q))
}

/// Posterior states for a new series with the network held fixed. Any
/// length is accepted.
pub fn amortized_apply<R: Rng + ?Sized>(post: &PosteriorParams, y: &ObsSeries, rng: &mut R) -> Result<SoftStateSeq> {
    Ok(posterior_sample(post, y, rng)?.0)
}

/// Average of `draws` posterior samples; rows stay on the simplex.
pub fn posterior_mean_states<R: Rng + ?Sized>(
    post: &PosteriorParams,
    y: &ObsSeries,
    draws: usize,
    rng: &mut R,
) -> Result<SoftStateSeq> {
    if draws == 0 {
        return Err(GdmError::InvalidArgument("need at least one posterior draw".into()));
    }
    let mut acc = Matrix::zeros(y.len(), post.k());
    for _ in 0..draws {
        let (z, _) = posterior_sample(post, y, rng)?;
        acc.add_assign(&z.z);
    }
    Ok(SoftStateSeq {
        z: acc.scale(1.0 / draws as f64),
    })
}
