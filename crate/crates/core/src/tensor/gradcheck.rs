use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences. Returns the largest `|analytic - numeric| / max(1, |numeric|)`
/// over all coordinates of `theta`.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if !y.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: y.shape().to_vec(),
            });
        }
        if !y.item().is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(y.item())
    };

    let mut tape = Tape::new();
    let v = tape.param(theta);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; theta.len()];
    let analytic = grads.get(v).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let x0 = theta.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
