//! Central finite-difference gradient checking in 64-bit.
//!
//! The numeric side only ever evaluates the forward closure, so it stays
//! independent of the backward closures it is checking.

use super::{no_grad, Rng, Tensor};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(input name, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Denominator floor for the relative error, so gradients that are zero up to
/// rounding compare on absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `d loss / d input` from [`Tensor::backward`] with central
/// differences at `probes` random coordinates spread over `inputs`.
///
/// Every input must be a trainable leaf; `loss` rebuilds the scalar from the
/// current input values each time it is called.
pub fn check_gradients(
    inputs: &[(&str, &Tensor<f64>)],
    loss: impl Fn() -> Result<Tensor<f64>>,
    probes: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::Contract("gradient check without inputs".into()));
    }
    for (name, t) in inputs {
        if !t.is_leaf() || !t.requires_grad() {
            return Err(Error::Contract(format!("gradient check input {name} must be a trainable leaf")));
        }
        t.zero_grad();
    }
    let l = loss()?;
    l.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let total: usize = inputs.iter().map(|(_, t)| t.numel()).sum();
    if total == 0 {
        return Err(Error::Contract("gradient check over empty inputs".into()));
    }
    let eval = || -> Result<f64> { no_grad(|| loss()?.item()) };
    let mut report = GradCheckReport { probes, max_rel_err: 0.0, worst: None };
    for _ in 0..probes {
        let mut flat = rng.below(total);
        let mut which = 0;
        while flat >= inputs[which].1.numel() {
            flat -= inputs[which].1.numel();
            which += 1;
        }
        let t = inputs[which].1;
        let orig = t.data()[flat];
        t.data_mut()?[flat] = orig + step;
        let plus = eval()?;
        t.data_mut()?[flat] = orig - step;
        let minus = eval()?;
        t.data_mut()?[flat] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[which][flat];
        let err = relative_error(a, numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient probe on {}", inputs[which].0)));
        }
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((inputs[which].0.to_string(), flat, a, numeric));
        }
    }
    for (_, t) in inputs {
        t.zero_grad();
    }
    Ok(report)
}
