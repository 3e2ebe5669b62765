//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side is (f(p+h) - f(p-h)) / (2h) per coordinate, which is the
//! independent oracle every gradient in this crate is checked against.
//! Functions with stop-gradient terms must be passed in *surrogate* form,
//! with the detached quantities frozen at the base point, so that the
//! analytic semantics and the differenced function agree.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to the denominator of the relative error.
///
/// Calibration: central differences at step h carry numerator noise of at
/// least ulp(|f|)/2h (~1e-10..1e-9 for loss values of a few units at
/// h = 1e-6), so coordinates whose true gradient is near zero read pure
/// noise. The floor must satisfy `tolerance * floor > noise` for such
/// coordinates to be judged as agreeing; 1e-3 leaves a 1e-8 budget while a
/// genuinely wrong gradient still produces relative errors many orders of
/// magnitude above any useful tolerance.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Location and values of the worst-agreeing coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoord {
    /// Index into the parameter list.
    pub param: usize,
    /// Flat index within that parameter tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: WorstCoord,
}

/// Relative error with an absolute floor in the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare `analytic_fn`'s gradient of `value_fn` against central finite
/// differences, coordinate by coordinate over every parameter tensor.
///
/// `value_fn` must be pure and deterministic in its parameters.
pub fn grad_check<V, G>(
    value_fn: V,
    analytic_fn: G,
    params: &[Tensor],
    step: f64,
) -> Result<GradCheckReport>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    if params.is_empty() {
        return Err(Error::Config("grad_check needs at least one parameter".into()));
    }
    let analytic = analytic_fn(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Config(format!(
            "analytic gradient has {} tensors, parameters have {}",
            analytic.len(),
            params.len()
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report: Option<GradCheckReport> = None;

    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Config(format!(
                "gradient {pi} has shape {:?}, parameter has {:?}",
                grad.shape(),
                params[pi].shape()
            )));
        }
        for ci in 0..grad.numel() {
            let a = grad.values()[ci];
            if !a.is_finite() {
                return Err(Error::GradCheck {
                    param: pi,
                    index: ci,
                    detail: format!("analytic gradient is {a}"),
                });
            }
            let base = params[pi].values()[ci];

            work[pi].values_mut()[ci] = base + step;
            let up = value_fn(&work)?;
            work[pi].values_mut()[ci] = base - step;
            let down = value_fn(&work)?;
            work[pi].values_mut()[ci] = base;

            let n = (up - down) / (2.0 * step);
            if !n.is_finite() {
                return Err(Error::GradCheck {
                    param: pi,
                    index: ci,
                    detail: format!("numeric gradient is {n} (f+ = {up}, f- = {down})"),
                });
            }
            let rel = relative_error(a, n);
            let better = match &report {
                Some(r) => rel > r.max_rel_err,
                None => true,
            };
            if better {
                report = Some(GradCheckReport {
                    max_rel_err: rel,
                    worst: WorstCoord {
                        param: pi,
                        index: ci,
                        analytic: a,
                        numeric: n,
                    },
                });
            }
        }
    }
    Ok(report.expect("at least one coordinate"))
}
