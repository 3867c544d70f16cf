//! Central finite-difference check of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Entries whose gradients are below this magnitude are compared in
/// absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (slot, entry, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of `f` at `params` against central finite
/// differences with step `h`. `f` receives the parameter leaves in order.
pub fn check_gradients<F>(params: &[Matrix], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?.params()
    };
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let mut work = params.to_vec();
    for slot in 0..params.len() {
        for e in 0..params[slot].len() {
            let orig = params[slot].data()[e];
            work[slot].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[slot].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[slot].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[slot].data()[e];
            let err = relative_error(a, numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst = Some((slot, e, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
