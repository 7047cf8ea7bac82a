//! Finite-difference verification of analytic gradients.

use super::{Tape, TapeError, Var};
use crate::matrix::Matrix;

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`, returning the max over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must build the same computation whenever it is called with the same
/// leaf values: any stochastic inputs have to be frozen inside the closure.
pub fn grad_check<F>(f: F, point: &[Matrix], eps: f64) -> Result<f64, TapeError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TapeError>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = f(&tape, &leaves)?;
    if !tape.value(loss).is_finite() {
        return Err(TapeError::NonFinite("grad_check forward"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = leaves
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| Matrix::zeros(tape.value(v).rows(), tape.value(v).cols()))
        })
        .collect();

    let eval = |pt: &[Matrix]| -> Result<f64, TapeError> {
        let t = Tape::new();
        let vars: Vec<Var> = pt.iter().map(|m| t.input(m.clone())).collect();
        let out = f(&t, &vars)?;
        let v = t.value_scalar(out);
        if !v.is_finite() {
            return Err(TapeError::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut worst = 0.0_f64;
    let mut perturbed: Vec<Matrix> = point.to_vec();
    for (pi, p) in point.iter().enumerate() {
        for i in 0..p.len() {
            let orig = p.as_slice()[i];
            perturbed[pi].as_mut_slice()[i] = orig + eps;
            let up = eval(&perturbed)?;
            perturbed[pi].as_mut_slice()[i] = orig - eps;
            let down = eval(&perturbed)?;
            perturbed[pi].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].as_slice()[i];
            if !numeric.is_finite() {
                return Err(TapeError::NonFinite("grad_check difference"));
            }
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
