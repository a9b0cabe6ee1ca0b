//! Central finite-difference verification of [`Mlp::backward`].

use alloc::vec::Vec;

use super::mlp::Mlp;
use crate::error::Result;
use crate::math;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// Index into the flat parameter vector of the worst entry.
    pub worst_param: usize,
    /// Same measure over the input gradient.
    pub max_input_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    math::abs(a - n) / math::abs(a).max(math::abs(n)).max(REL_FLOOR)
}

/// Scalar probe loss `sum(out * weights)`.
fn probe_loss(mlp: &Mlp, input: &[f64], rows: usize, weights: &[f64]) -> Result<f64> {
    let out = mlp.infer(input, rows)?;
    Ok(out.iter().zip(weights).map(|(o, w)| o * w).sum())
}

/// Compare [`Mlp::backward`] against central differences for every
/// parameter and every input entry, using the probe loss `sum(out * weights)`.
pub fn grad_check(mlp: &Mlp, input: &[f64], rows: usize, weights: &[f64], tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(mlp, input, rows, weights, tolerance, |m, x, r, w| {
        let (_, cache) = m.forward(x, r)?;
        m.backward(&cache, w)
    })
}

/// Like [`grad_check`] with a caller-supplied analytic gradient routine
/// returning `(parameter gradients, input gradients)`.
pub fn grad_check_with<F>(
    mlp: &Mlp,
    input: &[f64],
    rows: usize,
    weights: &[f64],
    tolerance: f64,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Mlp, &[f64], usize, &[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let (g_params, g_input) = analytic(mlp, input, rows, weights)?;
    let mut probe = mlp.clone();
    let mut max_rel = 0.0f64;
    let mut worst = 0;
    for i in 0..probe.param_count() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + FD_STEP;
        let up = probe_loss(&probe, input, rows, weights)?;
        probe.params_mut()[i] = orig - FD_STEP;
        let down = probe_loss(&probe, input, rows, weights)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(g_params[i], numeric);
        if e > max_rel || e.is_nan() {
            max_rel = if e.is_nan() { f64::INFINITY } else { e };
            worst = i;
        }
    }
    let mut x = input.to_vec();
    let mut max_in = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = probe_loss(mlp, &x, rows, weights)?;
        x[i] = orig - FD_STEP;
        let down = probe_loss(mlp, &x, rows, weights)?;
        x[i] = orig;
        let e = rel_err(g_input[i], (up - down) / (2.0 * FD_STEP));
        max_in = max_in.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        max_input_rel_error: max_in,
        checked: g_params.len() + x.len(),
        tolerance,
        passed: max_rel <= tolerance && max_in <= tolerance,
    })
}
