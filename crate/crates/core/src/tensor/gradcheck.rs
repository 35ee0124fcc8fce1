use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!(
            "grad_check step must be > 0, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    if !tape.value(root).is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(probe);
        let r = f(&mut tape, v)?;
        let out = tape.value(r).item();
        if !out.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(out)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
