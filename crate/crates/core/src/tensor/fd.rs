//! Central finite-difference gradient oracle.

use super::{Tape, Tensor, TensorError, Var};

/// Identity helper that pins a closure to the higher-ranked signature
/// `finite_difference_check` expects; handy when a closure is bound to a
/// variable before the call.
pub fn fd_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    f
}

/// Compare the autodiff gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. Fails if `f` produces a
/// non-finite or non-scalar value anywhere it is evaluated.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let eval_at = |data: Vec<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(x.shape().to_vec(), data)?);
        let y = f(&tape, v)?;
        if y.numel() != 1 {
            return Err(TensorError::NonScalarOutput { shape: y.shape() });
        }
        let val = y.item();
        if !val.is_finite() {
            return Err(TensorError::NonFinite("finite_difference_check".into()));
        }
        Ok(val)
    };

    // analytic gradient once
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarOutput { shape: y.shape() });
    }
    if !y.item().is_finite() {
        return Err(TensorError::NonFinite("finite_difference_check".into()));
    }
    let analytic = y.grad(&[xv], false)?[0].value();

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        let ana = analytic.data()[i];
        let rel = (ana - numeric).abs() / ana.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
