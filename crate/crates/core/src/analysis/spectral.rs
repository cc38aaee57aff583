use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralNorm {
    /// Largest singular value.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn apply_gram(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mv: Vec<f64> = (0..r).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect();
    let mut out = vec![0.0; c];
    for (i, s) in mv.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(m.row(i)) {
            *o += a * s;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of a 2-D matrix by power iteration on `mᵀm`,
/// stopping once the estimate moves by less than `tol` (relative).
pub fn spectral_norm(m: &Tensor, max_iters: usize, tol: f64) -> Result<SpectralNorm> {
    if m.shape().len() != 2 {
        return Err(Error::shape("spectral_norm", m.shape(), &[0, 0]));
    }
    if !m.is_finite() {
        return Err(Error::diverged(None, "non-finite matrix"));
    }
    let c = m.shape()[1];
    if c == 0 || m.data().iter().all(|&x| x == 0.0) {
        return Ok(SpectralNorm {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    // Start from the all-ones direction; fall back to basis vectors if it
    // happens to lie in the null space.
    let starts = std::iter::once(vec![1.0; c]).chain((0..c).map(|k| {
        let mut e = vec![0.0; c];
        e[k] = 1.0;
        e
    }));
    for start in starts {
        let n0 = norm(&start);
        let mut v: Vec<f64> = start.iter().map(|x| x / n0).collect();
        let mut estimate = 0.0f64;
        let mut w = apply_gram(m, &v);
        if norm(&w) == 0.0 {
            continue;
        }
        for it in 1..=max_iters {
            // Rayleigh quotient of the unit vector under mᵀm.
            let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            let sigma = lambda.max(0.0).sqrt();
            let wn = norm(&w);
            v = w.iter().map(|x| x / wn).collect();
            w = apply_gram(m, &v);
            if it > 1 && (sigma - estimate).abs() <= tol * sigma.max(1.0) {
                let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
                return Ok(SpectralNorm {
                    value: lambda.max(0.0).sqrt(),
                    iterations: it,
                    converged: true,
                });
            }
            estimate = sigma;
        }
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        return Ok(SpectralNorm {
            value: lambda.max(0.0).sqrt(),
            iterations: max_iters,
            converged: false,
        });
    }
    unreachable!("a nonzero matrix has a basis vector outside its null space")
}
