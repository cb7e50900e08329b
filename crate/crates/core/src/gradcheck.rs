//! Finite-difference verification of analytic gradients.
//!
//! The comparator is deliberately decoupled from the tape: it takes a pure
//! scalar function and a claimed gradient, so a caller can also hand it a
//! wrong gradient and confirm the check fails (negative control).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    /// max_i |a_i - n_i| / max(1e-8, max_i max(|a_i|, |n_i|))
    pub rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Compare `analytic` against central differences of `f` around `x0`.
pub fn compare_gradient(
    x0: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    h: f64,
) -> Result<GradReport> {
    if analytic.len() != x0.len() {
        return Err(Error::shape(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x0.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step size must be positive, got {h}")));
    }
    let mut x = x0.to_vec();
    let mut numeric = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    let mut scale = 1e-8f64;
    for i in 0..x0.len() {
        scale = scale.max(analytic[i].abs()).max(numeric[i].abs());
    }
    let mut worst = 0usize;
    let mut max_abs = 0.0f64;
    for i in 0..x0.len() {
        let d = (analytic[i] - numeric[i]).abs();
        if d > max_abs {
            max_abs = d;
            worst = i;
        }
    }
    Ok(GradReport {
        rel_err: max_abs / scale,
        worst_index: worst,
        analytic_at_worst: analytic[worst],
        numeric_at_worst: numeric[worst],
    })
}

/// Run `f` once to obtain the analytic gradient, then compare it against
/// central differences of the scalar value of the same function.
pub fn check_function(
    x0: &[f64],
    mut eval: impl FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
    h: f64,
) -> Result<GradReport> {
    let (_, grad) = eval(x0, true)?;
    let analytic =
        grad.ok_or_else(|| Error::Contract("eval(_, true) must return a gradient".into()))?;
    compare_gradient(x0, &analytic, |x| eval(x, false).map(|(v, _)| v), h)
}

pub const FD_STEP: f64 = 1e-5;
pub const TOL_PRIMITIVE: f64 = 1e-4;
pub const TOL_COMPOSED: f64 = 1e-3;
