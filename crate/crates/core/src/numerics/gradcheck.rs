use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences at `point`. Returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.take(x).expect("x is a trainable leaf");

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let out = f(&mut tape, x)?;
        let v = tape.value(out).item()?;
        if v.is_nan() {
            return Err(Error::Numeric("function returned NaN".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
