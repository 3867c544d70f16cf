use std::cell::Cell;

use super::matrix::Matrix;
use crate::error::{GdmError, Result};

thread_local! {
    static STEPS_TAKEN: Cell<u64> = const { Cell::new(0) };
}

/// Number of optimizer steps applied on the current thread so far. Lets
/// callers check that a code path performs no optimization.
pub fn optimizer_steps_taken() -> u64 {
    STEPS_TAKEN.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One bias-corrected adaptive-moment descent step. Pure: returns new
/// parameters and state, leaving the inputs untouched.
pub fn adam_step(
    params: &[Matrix],
    grads: &[Matrix],
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Vec<Matrix>, AdamState)> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GdmError::Dimension(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(p.mismatch("adam_step", g));
        }
        if !g.is_finite() {
            return Err(GdmError::NonFinite(format!("gradient of parameter slot {i}")));
        }
    }

    STEPS_TAKEN.with(|c| c.set(c.get() + 1));
    let step = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        let mut p = p.clone();
        let mut m = m.clone();
        let mut v = v.clone();
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        new_params.push(p);
        new_m.push(m);
        new_v.push(v);
    }
    Ok((
        new_params,
        AdamState {
            m: new_m,
            v: new_v,
            step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Matrix> {
        vec![Matrix::scalar(v)]
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr*g/(|g|+eps).
        let p = one(0.0);
        let (np, st) = adam_step(&p, &one(1.0), &AdamState::new(&p), &AdamConfig::default()).unwrap();
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((np[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let p = one(3.0);
        let mut st = AdamState::new(&p);
        st.m = one(0.5);
        st.v = one(0.25);
        st.step = 4;
        let (np, st2) = adam_step(&p, &one(0.0), &st, &AdamConfig::default()).unwrap();
        // m is nonzero so the parameter moves; moments must decay geometrically.
        assert!((st2.m[0].data()[0] - 0.45).abs() < 1e-15);
        assert!((st2.v[0].data()[0] - 0.25 * 0.999).abs() < 1e-15);
        let fresh = AdamState::new(&p);
        let (np0, _) = adam_step(&p, &one(0.0), &fresh, &AdamConfig::default()).unwrap();
        assert_eq!(np0, p);
        assert!(np[0].data()[0] < 3.0);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        // With constant g, m_hat -> g and v_hat -> g^2 exactly after bias
        // correction, so every step has magnitude lr*|g|/(|g|+eps).
        let cfg = AdamConfig::default();
        let mut p = one(0.0);
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let before = p[0].data()[0];
            let (np, ns) = adam_step(&p, &one(-2.5), &st, &cfg).unwrap();
            let delta = np[0].data()[0] - before;
            assert!((delta - cfg.lr * 2.5 / (2.5 + cfg.eps)).abs() < 1e-12);
            p = np;
            st = ns;
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let p = one(0.0);
        let err = adam_step(&p, &one(f64::NAN), &AdamState::new(&p), &AdamConfig::default());
        assert!(matches!(err, Err(GdmError::NonFinite(_))));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Matrix::row_vector(&[30.0, 40.0])];
        let n = clip_global_norm(&mut g, 10.0);
        assert_eq!(n, 50.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
    }
}
