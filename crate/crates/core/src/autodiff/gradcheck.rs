//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - fd| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// Coordinates where the one-sided slopes disagree (a kink); not checked.
    pub skipped: Vec<usize>,
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
///
/// `f` receives a fresh tape and the variable holding `x` and must return a
/// scalar. Coordinates where the forward and backward difference quotients
/// differ by more than `1e-2 * max(1, |central|)` are treated as
/// nondifferentiable points and skipped.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    let f0 = tape.value(root).item();
    let grads = tape.backward(root, &[xv])?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |pt: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(pt);
        let r = f(&mut t, v)?;
        let y = t.value(r).item();
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let mut numeric = vec![0.0; x.len()];
    let mut skipped = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.values_mut()[i] += h;
        let mut minus = x.clone();
        minus.values_mut()[i] -= h;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let central = (fp - fm) / (2.0 * h);
        *slot = central;
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs() > 1e-2 * central.abs().max(1.0) {
            skipped.push(i);
            continue;
        }
        let a = analytic.values()[i];
        max_rel_error = max_rel_error.max((a - central).abs() / a.abs().max(1.0));
    }
    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        numeric: Tensor::from_parts(x.shape().to_vec(), numeric),
        skipped,
    })
}
