use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `at`, in 64-bit mode.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// The function must be differentiable at `at`; callers are expected to keep
/// the evaluation point (and the `step`-ball around it) away from kinks such
/// as `abs(0)`, clamp edges, pooling ties and rounding boundaries.
pub fn grad_check<F>(mut f: F, at: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let x = tape.input(at.clone(), true);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            lhs: tape.value(y).shape().to_vec(),
            rhs: vec![1],
        });
    }
    tape.value(y).check_finite("grad_check")?;
    tape.backward(y)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.clone(),
        None => Tensor::zeros(at.shape().to_vec()),
    };

    let mut eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::no_grad(Precision::F64);
        let v = t.input(point, false);
        let out = f(&mut t, v)?;
        let val = t.value(out).item();
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let mut plus = at.clone();
        plus.data_mut()[i] += step;
        let mut minus = at.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
