use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error. Central differences in double
/// precision with `h = 1e-5` carry absolute noise near `1e-11 · |f|`, so
/// gradients below this floor are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Outcome of comparing backward gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)` over compared positions.
    pub max_rel_error: f64,
    /// Position of the worst mismatch.
    pub worst_index: Option<usize>,
    pub compared: usize,
    /// Positions skipped because a piecewise-linear unit changed state
    /// between `x + h` and `x - h`.
    pub excluded: usize,
}

/// Checks the gradient of scalar `f` at `x` by central differences with
/// step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        tape.track_activation_pattern();
        let v = tape.leaf(point, false);
        let out = f(&mut tape, v)?;
        Ok((tape.value(out).item(), tape.activation_pattern().unwrap_or_default().to_vec()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, compared: 0, excluded: 0 };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, pat_p) = eval(plus)?;
        let (fm, pat_m) = eval(minus)?;
        if pat_p != pat_m {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.compared += 1;
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
