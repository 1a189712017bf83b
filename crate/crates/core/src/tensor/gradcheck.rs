//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-3;

/// Halvings of the step tried when a perturbation crosses a kink.
pub const FD_REFINEMENTS: u32 = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-12)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates evaluated with a reduced step to stay off a kink.
    pub refined: usize,
    /// Coordinates skipped because every step crossed a kink.
    pub skipped: usize,
}

/// Compares `analytic` against central differences of `objective` around
/// `input`.
///
/// The error is normalised by the largest numeric gradient magnitude so that
/// near-zero coordinates do not dominate. Returns [`Error::GradCheck`] when
/// the error exceeds `tolerance`.
pub fn grad_check<F>(
    mut objective: F,
    input: &Tensor,
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    grad_check_piecewise(|t| objective(t).map(|v| (v, 0)), input, analytic, tolerance)
}

/// Variant for piecewise-smooth objectives: `objective` also returns an
/// activation-pattern signature. When the `±h` evaluations do not share the
/// signature of the unperturbed point the step is halved up to
/// [`FD_REFINEMENTS`] times, after which the coordinate is skipped.
pub fn grad_check_piecewise<F>(
    mut objective: F,
    input: &Tensor,
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<(f64, u64)>,
{
    if analytic.len() != input.len() {
        return Err(Error::dim("analytic gradient length differs from input"));
    }
    let mut numeric = vec![None; input.len()];
    let mut refined = 0;
    let mut probe = input.clone();
    let (_, s0) = objective(input)?;
    for i in 0..input.len() {
        let x0 = input.data()[i];
        let mut step = FD_STEP;
        for attempt in 0..=FD_REFINEMENTS {
            let xp = (x0 as f64 + step) as f32;
            let xm = (x0 as f64 - step) as f32;
            probe.data_mut()[i] = xp;
            let (fp, sp) = objective(&probe)?;
            probe.data_mut()[i] = xm;
            let (fm, sm) = objective(&probe)?;
            if sp == s0 && sm == s0 {
                numeric[i] = Some((fp - fm) / (xp as f64 - xm as f64));
                refined += usize::from(attempt > 0);
                break;
            }
            step *= 0.5;
        }
        probe.data_mut()[i] = x0;
    }
    let scale = numeric
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        refined,
        skipped: 0,
    };
    for (i, n) in numeric.iter().enumerate() {
        match n {
            Some(n) => {
                report.checked += 1;
                let err = (analytic[i] - n).abs() / scale;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_index = i;
                }
            }
            None => report.skipped += 1,
        }
    }
    if report.max_rel_err > tolerance {
        return Err(Error::GradCheck {
            max_rel_err: report.max_rel_err,
            index: report.worst_index,
            tolerance,
        });
    }
    Ok(report)
}
