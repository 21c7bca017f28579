use crate::error::{invalid, CoreError, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Relative error with magnitudes below `1e-3` treated on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-3);
    libm::fabs(analytic - numeric) / denom
}

fn eval<F>(f: &F, point: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(CoreError::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` at `point` against central finite
/// differences and returns the largest per-coordinate relative error.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let analytic = if tape.requires_grad(y) {
        tape.backward(y)?.wrt(&tape, x)
    } else {
        if tape.value(y).len() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: tape.shape(y).to_vec(),
            });
        }
        Tensor::zeros(point.shape())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
