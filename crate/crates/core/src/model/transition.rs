//! Transition-logit families `pi_t = f(z_{t-1}, u_{t-1})` where `u` is the
//! low-dimensional driving input (the projected previous observation in the
//! two-level model, the previous latent point in the three-level model).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::nn::{Fnn, GruCell, TrackedFnn, TrackedGru};
use crate::diffmath::{ArrayCursor, Leaves, Matrix, Trainable, Var};
use crate::error::{GdmError, Result};

pub const DEFAULT_HIDDEN: usize = 16;
pub const DEFAULT_FNN_WIDTH: usize = 32;
pub const DEFAULT_STICKINESS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Linear,
    StickyLinear,
    Recurrent,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::StickyLinear => "sticky-linear",
            Variant::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = GdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Variant::Linear),
            "sticky-linear" | "sticky" => Ok(Variant::StickyLinear),
            "recurrent" => Ok(Variant::Recurrent),
            other => Err(GdmError::InvalidArgument(format!(
                "unknown variant '{other}' (expected linear, sticky-linear or recurrent)"
            ))),
        }
    }
}

/// `pi = W u + r` with `W` stored as `K x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransition {
    pub weights: Matrix,
    pub bias: Matrix,
}

/// `h_t = GRU(h_{t-1}, u_{t-1})`, `pi_t = FNN([z_{t-1}, h_t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentTransition {
    pub gru: GruCell,
    pub fnn: Fnn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransitionFamily {
    Linear(LinearTransition),
    /// `pi = (1 - gamma)(W u + r) + gamma z_prev`; `gamma` is a fixed
    /// hyperparameter in `[0, 1)`.
    StickyLinear { linear: LinearTransition, stickiness: f64 },
    Recurrent(RecurrentTransition),
}

impl TransitionFamily {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, variant: Variant, k: usize, d: usize) -> Self {
        let mut linear = || {
            let normal = Normal::new(0.0, 0.1).expect("valid normal");
            LinearTransition {
                weights: Matrix::from_fn(k, d, |_, _| normal.sample(&mut *rng)),
                bias: Matrix::zeros(1, k),
            }
        };
        match variant {
            Variant::Linear => TransitionFamily::Linear(linear()),
            Variant::StickyLinear => TransitionFamily::StickyLinear {
                linear: linear(),
                stickiness: DEFAULT_STICKINESS,
            },
            Variant::Recurrent => {
                let gru = GruCell::init(rng, d, DEFAULT_HIDDEN);
                let fnn = Fnn::init(rng, k + DEFAULT_HIDDEN, DEFAULT_FNN_WIDTH, k);
                TransitionFamily::Recurrent(RecurrentTransition { gru, fnn })
            }
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            TransitionFamily::Linear(_) => Variant::Linear,
            TransitionFamily::StickyLinear { .. } => Variant::StickyLinear,
            TransitionFamily::Recurrent(_) => Variant::Recurrent,
        }
    }

    /// Checks the family against state count `k` and input dimension `d`.
    pub fn validate(&self, k: usize, d: usize) -> Result<()> {
        let check_linear = |l: &LinearTransition| -> Result<()> {
            if l.weights.shape() != (k, d) || l.bias.shape() != (1, k) {
                return Err(GdmError::Dimension(format!(
                    "linear transition weights {:?} / bias {:?}, expected ({k}, {d}) / (1, {k})",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
            Ok(())
        };
        match self {
            TransitionFamily::Linear(l) => check_linear(l),
            TransitionFamily::StickyLinear { linear, stickiness } => {
                if !(0.0..1.0).contains(stickiness) {
                    return Err(GdmError::InvalidArgument(format!(
                        "stickiness must lie in [0, 1), got {stickiness}"
                    )));
                }
                check_linear(linear)
            }
            TransitionFamily::Recurrent(r) => {
                let h = r.gru.hidden_size();
                if h < 1 || r.gru.input_size() != d || r.fnn.input_size() != k + h || r.fnn.w2.cols() != k {
                    return Err(GdmError::Dimension(format!(
                        "recurrent transition sizes inconsistent with K={k}, D={d} (hidden {h})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn hidden_size(&self) -> Option<usize> {
        match self {
            TransitionFamily::Recurrent(r) => Some(r.gru.hidden_size()),
            _ => None,
        }
    }

    pub fn stickiness(&self) -> Option<f64> {
        match self {
            TransitionFamily::StickyLinear { stickiness, .. } => Some(*stickiness),
            _ => None,
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Matrix)> {
        match self {
            TransitionFamily::Linear(l) | TransitionFamily::StickyLinear { linear: l, .. } => vec![
                (format!("{prefix}.weights"), l.weights.clone()),
                (format!("{prefix}.bias"), l.bias.clone()),
            ],
            TransitionFamily::Recurrent(r) => {
                let mut v = r.gru.named(&format!("{prefix}.gru"));
                v.extend(r.fnn.named(&format!("{prefix}.fnn")));
                v
            }
        }
    }

    /// Rebuilds a family of the given shape from named arrays (as produced by
    /// [`TransitionFamily::named`]).
    pub fn from_named(
        variant: Variant,
        stickiness: Option<f64>,
        mut get: impl FnMut(&str) -> Result<Matrix>,
        prefix: &str,
    ) -> Result<Self> {
        let linear = |get: &mut dyn FnMut(&str) -> Result<Matrix>| -> Result<LinearTransition> {
            Ok(LinearTransition {
                weights: get(&format!("{prefix}.weights"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        Ok(match variant {
            Variant::Linear => TransitionFamily::Linear(linear(&mut get)?),
            Variant::StickyLinear => TransitionFamily::StickyLinear {
                linear: linear(&mut get)?,
                stickiness: stickiness.ok_or_else(|| GdmError::Checkpoint("missing stickiness".into()))?,
            },
            Variant::Recurrent => {
                let gru = GruCell::from_named(&mut get, &format!("{prefix}.gru"))?;
                let fnn = Fnn::from_named(&mut get, &format!("{prefix}.fnn"))?;
                TransitionFamily::Recurrent(RecurrentTransition { gru, fnn })
            }
        })
    }

    /// Re-expresses the family for inputs `u' = M u` (used when the latent
    /// coordinates of the three-level model are transformed). `m_inv` is
    /// `M^{-1}` (`D x D`).
    pub fn reparameterize_input(&self, m_inv: &Matrix) -> Result<Self> {
        Ok(match self {
            TransitionFamily::Linear(l) => TransitionFamily::Linear(LinearTransition {
                weights: l.weights.matmul(m_inv)?,
                bias: l.bias.clone(),
            }),
            TransitionFamily::StickyLinear { linear, stickiness } => TransitionFamily::StickyLinear {
                linear: LinearTransition {
                    weights: linear.weights.matmul(m_inv)?,
                    bias: linear.bias.clone(),
                },
                stickiness: *stickiness,
            },
            TransitionFamily::Recurrent(r) => {
                // Row-vector convention: x W with x' = x M^T, so W' = M^{-T} W.
                let left = m_inv.transpose();
                let mut gru = r.gru.clone();
                gru.w_xr = left.matmul(&gru.w_xr)?;
                gru.w_xu = left.matmul(&gru.w_xu)?;
                gru.w_xn = left.matmul(&gru.w_xn)?;
                TransitionFamily::Recurrent(RecurrentTransition { gru, fnn: r.fnn.clone() })
            }
        })
    }

    pub fn bind<'t>(&self, leaves: &mut Leaves<'_, 't>) -> Result<TrackedTransition<'t>> {
        match self {
            TransitionFamily::Linear(_) => {
                let w = leaves.next()?;
                let bias = leaves.next()?;
                Ok(TrackedTransition::Linear { w_t: w.t(), bias })
            }
            TransitionFamily::StickyLinear { stickiness, .. } => {
                let w = leaves.next()?;
                let bias = leaves.next()?;
                Ok(TrackedTransition::Sticky {
                    w_t: w.t(),
                    bias,
                    gamma: *stickiness,
                })
            }
            TransitionFamily::Recurrent(r) => Ok(TrackedTransition::Recurrent {
                gru: r.gru.bind(leaves)?,
                fnn: r.fnn.bind(leaves)?,
            }),
        }
    }
}

impl Trainable for TransitionFamily {
    fn arrays(&self) -> Vec<Matrix> {
        self.named("").into_iter().map(|(_, m)| m).collect()
    }

    fn set_arrays(&mut self, cur: &mut ArrayCursor<'_>) -> Result<()> {
        match self {
            TransitionFamily::Linear(l) | TransitionFamily::StickyLinear { linear: l, .. } => {
                l.weights = cur.take(l.weights.shape())?;
                l.bias = cur.take(l.bias.shape())?;
                Ok(())
            }
            TransitionFamily::Recurrent(r) => {
                r.gru.set_arrays(cur)?;
                r.fnn.set_arrays(cur)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrackedTransition<'t> {
    Linear { w_t: Var<'t>, bias: Var<'t> },
    Sticky { w_t: Var<'t>, bias: Var<'t>, gamma: f64 },
    Recurrent { gru: TrackedGru<'t>, fnn: TrackedFnn<'t> },
}

impl<'t> TrackedTransition<'t> {
    /// Initial recurrent state for a batch of `batch` rows (`None` for the
    /// memoryless families).
    pub fn initial_state(&self, batch: usize) -> Option<Var<'t>> {
        match self {
            TrackedTransition::Recurrent { gru, .. } => Some(gru.zero_state(batch)),
            _ => None,
        }
    }

    /// One batched transition: rows of `z_prev` (`B x K`) and `u_prev`
    /// (`B x D`) map to logits (`B x K`). For the recurrent family
    /// `h_prev` is advanced with `u_prev` first and returned.
    pub fn step(
        &self,
        z_prev: Var<'t>,
        u_prev: Var<'t>,
        h_prev: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        match self {
            TrackedTransition::Linear { w_t, bias } => Ok((u_prev.matmul(*w_t)?.add(*bias)?, None)),
            TrackedTransition::Sticky { w_t, bias, gamma } => {
                let lin = u_prev.matmul(*w_t)?.add(*bias)?;
                Ok((lin.scale(1.0 - gamma).add(z_prev.scale(*gamma))?, None))
            }
            TrackedTransition::Recurrent { gru, fnn } => {
                let h_prev = h_prev.ok_or_else(|| {
                    GdmError::InvalidArgument("recurrent transition needs a hidden state".into())
                })?;
                let h = gru.step(u_prev, h_prev)?;
                let input = z_prev.tape().hstack(&[z_prev, h])?;
                Ok((fnn.forward(input)?, Some(h)))
            }
        }
    }

    /// Logits for `t = 2..T` from `z_{1..T-1}` and `u_{1..T-1}`, both given
    /// as `(T-1)`-row matrices. The recurrent state starts at zero.
    pub fn sequence(&self, z_prev: Var<'t>, u_prev: Var<'t>) -> Result<Var<'t>> {
        match self {
            TrackedTransition::Recurrent { gru, fnn } => {
                let hs = gru.scan(u_prev, gru.zero_state(1))?;
                let input = z_prev.tape().hstack(&[z_prev, hs])?;
                fnn.forward(input)
            }
            _ => Ok(self.step(z_prev, u_prev, None)?.0),
        }
    }

    /// Hidden states `h_t` for `t = 1..T` given inputs `u_{1..T}`; row `t`
    /// has absorbed `u_1..u_{t-1}`. `None` for memoryless families.
    pub fn hidden_sequence(&self, u: Var<'t>) -> Result<Option<Var<'t>>> {
        match self {
            TrackedTransition::Recurrent { gru, .. } => {
                let t = u.shape().0;
                let h0 = gru.zero_state(1);
                if t == 1 {
                    return Ok(Some(h0));
                }
                let rest = gru.scan(u.rows(0, t - 1)?, h0)?;
                Ok(Some(u.tape().vstack(&[h0, rest])?))
            }
            _ => Ok(None),
        }
    }
}
