//! Finite-difference verification of the analytic gradient.

use super::network::{bce_loss, forward, loss_and_gradient, CnnParams};
use super::Result;

pub const FD_STEP: f64 = 1e-5;
/// Floor for the relative-error denominator, so parameters whose true
/// gradient is ~0 are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_params: usize,
}

fn example_loss(params: &CnnParams, ids: &[u32], truth: &[bool]) -> Result<f64> {
    Ok(bce_loss(&forward(params, ids)?.scores, truth))
}

/// Central-difference gradient of the single-example loss.
pub fn numeric_gradient(params: &CnnParams, ids: &[u32], truth: &[bool]) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + FD_STEP;
        let plus = example_loss(&probe, ids, truth)?;
        probe.as_mut_slice()[i] = orig - FD_STEP;
        let minus = example_loss(&probe, ids, truth)?;
        probe.as_mut_slice()[i] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Compares a supplied analytic gradient against finite differences.
pub fn compare_gradients(
    params: &CnnParams,
    ids: &[u32],
    truth: &[bool],
    analytic: &[f64],
) -> Result<GradCheckReport> {
    let numeric = numeric_gradient(params, ids, truth)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        n_params: params.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}

/// Max relative error between backprop and central differences (h = 1e-5)
/// over every parameter.
pub fn gradient_check(params: &CnnParams, ids: &[u32], truth: &[bool]) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_gradient(params, ids, truth)?;
    compare_gradients(params, ids, truth, &analytic)
}
