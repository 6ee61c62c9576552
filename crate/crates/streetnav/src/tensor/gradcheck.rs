//! Central finite-difference verification of tape gradients.

use super::{backward, Tape, Tensor, TensorError};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate, and returns the largest
/// relative error.
///
/// Discrepancies below an absolute floor of `1e-8` are ignored so that
/// coordinates whose true gradient is zero (dead ReLU paths, untouched
/// embedding rows) are not dominated by floating-point noise in the
/// difference quotient.
///
/// `build` must construct the same computation each call; anything
/// stochastic (dropout) has to be disabled or frozen by the caller.
pub fn finite_diff_check<F>(build: F, x: &[f64], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let eval = |point: &[f64]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let leaf = tape.constant(&[point.len()], point.to_vec())?;
        let out = build(&tape, &leaf)?;
        if out.len() != 1 {
            return Err(TensorError::Invalid {
                op: "finite_diff_check",
                msg: format!("function must be scalar-valued, got shape {:?}", out.shape()),
            });
        }
        Ok(out.item())
    };

    // Analytic gradient from one taped pass.
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(&[x.len()], x.to_vec())?;
        let out = build(&tape, &leaf)?;
        if out.len() != 1 {
            return Err(TensorError::Invalid {
                op: "finite_diff_check",
                msg: format!("function must be scalar-valued, got shape {:?}", out.shape()),
            });
        }
        let grads = backward(&out)?;
        grads.get_or_zeros(&leaf)
    };

    let mut worst = 0.0f64;
    let mut point = x.to_vec();
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = eval(&point)?;
        point[i] = orig - eps;
        let minus = eval(&point)?;
        point[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let diff = (analytic[i] - numeric).abs();
        if diff <= 1e-8 {
            continue;
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(diff / denom);
    }
    Ok(worst)
}
