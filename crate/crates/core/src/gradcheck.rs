//! Central-difference gradient checking.
//!
//! Every hand-derived backward pass in this crate is verified against this
//! checker. There is no autodiff tape anywhere: if a gradient is wrong, this
//! is the tool that catches it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Step size used for the central differences.
    pub eps: f64,
}

/// Compares `analytic_grad` against central differences of `f` around `x`.
///
/// For each coordinate `i` the numeric derivative is
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` and the relative error is
/// `|a - n| / max(|a|, |n|, 1e-8)`. Evaluations that return a non-finite
/// value abort with an evaluation error.
pub fn finite_diff_grad_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic_grad: &Tensor,
    eps: f64,
) -> Result<GradCheckReport> {
    if x.shape() != analytic_grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_grad_check",
            left: x.shape().to_vec(),
            right: analytic_grad.shape().to_vec(),
        });
    }
    let mut probe = x.clone();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval_finite(&mut f, &probe, i, "+eps")?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval_finite(&mut f, &probe, i, "-eps")?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let analytic = analytic_grad.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        eps,
    })
}

fn eval_finite(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    index: usize,
    side: &str,
) -> Result<f64> {
    let v = f(x)?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!(
            "f returned {v} while probing coordinate {index} ({side})"
        )));
    }
    Ok(v)
}
