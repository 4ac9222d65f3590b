//! Numerically stable scalar primitives, seeded randomness and a
//! finite-difference gradient checker.

mod array;
mod rng;

pub use array::DenseArray;
pub use rng::RngStream;

use crate::error::{Error, Result};

/// `log(sum_i exp(v_i))` computed by max-shifting so it never overflows.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "log_sum_exp of an empty vector".into(),
        ));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf collapses to -inf; a NaN or +inf propagates as itself.
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `log(mean_i exp(v_i))`, the aggregation step of importance-weighted bounds.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(values)? - (values.len() as f64).ln())
}

/// Compare an analytic gradient against central differences.
///
/// `value_fn` evaluates the scalar objective at perturbed parameters and
/// `grad_fn` produces the analytic gradient at `params`. Returns the maximum
/// over coordinates of `|a - n| / max(1e-8, |a| + |n|)` where `n` is the
/// central difference `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn grad_check<V, G>(value_fn: V, grad_fn: G, params: &DenseArray, eps: f64) -> Result<f64>
where
    V: Fn(&DenseArray) -> Result<f64>,
    G: Fn(&DenseArray) -> Result<DenseArray>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check eps must be > 0".into()));
    }
    let analytic = grad_fn(params)?;
    if analytic.shape() != params.shape() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient shape {:?} vs params {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let base = params.data()[i];
        probe.data_mut()[i] = base + eps;
        let f_plus = value_fn(&probe)?;
        probe.data_mut()[i] = base - eps;
        let f_minus = value_fn(&probe)?;
        probe.data_mut()[i] = base;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective non-finite probing coordinate {i} (f+ = {f_plus}, f- = {f_minus})"
            )));
        }
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
