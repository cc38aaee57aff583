//! Central finite differences: the independent oracle for every adjoint rule.

use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel::{map_range, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    /// `max_i |g_fd - g_an| / max(1, |g_fd|, |g_an|)`
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences with step `h`. `f` maps a flat parameter vector to
/// `(value, gradient)`.
pub fn finite_diff_check<F>(f: F, p: &[f64], h: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync + Send,
{
    finite_diff_check_with(Execution::default(), f, p, h)
}

pub fn finite_diff_check_with<F>(exec: Execution, f: F, p: &[f64], h: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let (f0, analytic) = f(p)?;
    if !f0.is_finite() {
        return Err(Error::diverged(None, "objective is not finite at the base point"));
    }
    if analytic.len() != p.len() {
        return Err(Error::shape("finite_diff_check", &[p.len()], &[analytic.len()]));
    }
    let eval = |q: &[f64]| -> Result<f64> {
        let (v, _) = f(q)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::diverged(None, "objective is not finite under perturbation"))
        }
    };
    let errors = map_range(exec, p.len(), |i| -> Result<f64> {
        let mut q = p.to_vec();
        q[i] = p[i] + h;
        let plus = eval(&q)?;
        q[i] = p[i] - h;
        let minus = eval(&q)?;
        let fd = (plus - minus) / (2.0 * h);
        let an = analytic[i];
        Ok((fd - an).abs() / 1f64.max(fd.abs()).max(an.abs()))
    });
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: p.len(),
    };
    for (i, e) in errors.into_iter().enumerate() {
        let e = e?;
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Jacobian `[outputs, inputs]` of a vector map by central differences,
/// one input column at a time.
pub fn central_jacobian<F>(exec: Execution, f: F, x: &[f64], h: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let n_out = f(x)?.len();
    let columns = map_range(exec, x.len(), |j| -> Result<Vec<f64>> {
        let mut q = x.to_vec();
        q[j] = x[j] + h;
        let plus = f(&q)?;
        q[j] = x[j] - h;
        let minus = f(&q)?;
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(Error::diverged(None, "non-finite output while perturbing"));
        }
        Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    });
    let mut out = vec![0.0; n_out * x.len()];
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            out[i * x.len() + j] = v;
        }
    }
    Tensor::new(vec![n_out, x.len()], out)
}
