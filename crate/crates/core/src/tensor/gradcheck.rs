//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
///
/// Numeric evaluations pin every `stop_gradient` output to its value at the
/// unperturbed point, so only the differentiable path is perturbed.
pub fn gradient_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("gradient_check step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    let value = g.value(y).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at the base point")));
    }
    let pinned = g.stopped_values().to_vec();
    let analytic = g.backward(y)?.get(xv);
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let eval = |point: Tensor<S>| -> Result<f64> {
        let mut g = Graph::with_pinned_stops(pinned.clone());
        let xv = g.constant(point);
        let y = f(&mut g, xv)?;
        let v = g.value(y).item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v} at a perturbed point")));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += S::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= S::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i].as_f64() - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
