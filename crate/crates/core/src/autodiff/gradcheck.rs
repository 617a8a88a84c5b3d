//! Central finite-difference checks for tape gradients.

use thiserror::Error;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step h must be positive, got {0}")]
    BadStep(f64),
    #[error("non-finite {which} estimate at coordinate {index}")]
    NonFinite { which: &'static str, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / (|numeric| + 1e-8)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of the scalar built by `f` at `point` against
/// central differences with step `h`.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point. If `coords` is given only those coordinates are checked.
pub fn grad_check<F>(
    mut f: F,
    point: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(GradCheckError::BadStep(h));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    let full = tape.backward(loss)?.wrt(x);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };

    let mut eval = |p: Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let l = f(&mut tape, x)?;
        Ok(tape.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let analytic = full.data()[i];
        if !numeric.is_finite() {
            return Err(GradCheckError::NonFinite {
                which: "numeric",
                index: i,
            });
        }
        if !analytic.is_finite() {
            return Err(GradCheckError::NonFinite {
                which: "analytic",
                index: i,
            });
        }
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
