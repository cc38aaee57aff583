//! Value-level kernels. The tape records these and adds the adjoint rules.

use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel::{for_each_row_chunk, Execution};

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 17;

fn exec_for(work: usize) -> Execution {
    if work >= PAR_MATMUL_WORK {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row_chunk(exec_for(m * k * n), &mut out, n, |first, chunk| {
        for (r, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = first + r;
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row_chunk(exec_for(m * k * n), &mut out, n, |first, chunk| {
        for (r, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = first + r;
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
        }
    });
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for_each_row_chunk(exec_for(m * k * n), &mut out, n, |first, chunk| {
        for (r, out_row) in chunk.chunks_mut(n).enumerate() {
            let p = first + r;
            for i in 0..m {
                let av = a[i * k + p];
                let b_row = &b[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

/// Treats `a` as `[rows, k]` (all leading axes flattened) and `b` as `[k, n]`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    if a.is_empty() || b.len() != 2 || a[a.len() - 1] != b[0] {
        return Err(Error::shape("matmul", a, b));
    }
    let k = b[0];
    let n = b[1];
    let m = a[..a.len() - 1].iter().product();
    let mut shape = a[..a.len() - 1].to_vec();
    shape.push(n);
    Ok((m, k, n, shape))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())?;
    Tensor::new(shape, mm(a.data(), b.data(), m, k, n))
}

/// `a · bᵀ` for 2-D operands.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    Tensor::new(vec![m, n], mm_nt(a.data(), b.data(), m, k, n))
}

/// `aᵀ · b` for 2-D operands.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(vec![k, n], mm_tn(a.data(), b.data(), m, k, n))
}

/// Row-wise RMS normalisation. Returns the output and `1/sqrt(mean(x²)+eps)`
/// per row.
pub(crate) fn rms_norm_raw(x: &[f64], d: usize, scale: Option<&[f64]>, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let denom = (ms + eps).sqrt();
        // eps = 0 with an all-zero row: define the output as zero.
        let ir = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv[r] = ir;
        let or = &mut out[r * d..(r + 1) * d];
        match scale {
            Some(s) => {
                for j in 0..d {
                    or[j] = xr[j] * ir * s[j];
                }
            }
            None => {
                for j in 0..d {
                    or[j] = xr[j] * ir;
                }
            }
        }
    }
    (out, inv)
}

/// `y = x / sqrt(mean(x²) + eps) ⊙ scale` over the last axis.
pub fn rms_norm(x: &Tensor, scale: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 {
        return Err(Error::shape("rms_norm", x.shape(), &[]));
    }
    if let Some(s) = scale {
        if s.shape() != [d] {
            return Err(Error::shape("rms_norm", x.shape(), s.shape()));
        }
    }
    if !(eps >= 0.0) {
        return Err(Error::Contract(format!("rms_norm eps must be >= 0, got {eps}")));
    }
    let (out, _) = rms_norm_raw(x.data(), d, scale.map(|s| s.data()), eps);
    Tensor::new(x.shape().to_vec(), out)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// Softmax over each row of `x` (`[rows, n]`), in place. `-inf` entries are
/// masked. Fails if a row has no finite entry.
pub(crate) fn softmax_rows_in_place(x: &mut [f64], n: usize) -> Result<()> {
    for (r, row) in x.chunks_mut(n).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Mask { row: r });
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if x.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Contract("softmax input must be finite or -inf".into()));
    }
    let mut data = x.data().to_vec();
    softmax_rows_in_place(&mut data, n)?;
    Tensor::new(x.shape().to_vec(), data)
}

/// Log-sum-exp of a row.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = logits.last_dim();
    if logits.rows() != targets.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if targets.is_empty() {
        return Err(Error::Contract("cross entropy over an empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Index {
                what: "target",
                index: t,
                bound: v,
            });
        }
        let row = logits.row(r);
        total += logsumexp(row) - row[t];
    }
    Ok(total / targets.len() as f64)
}

/// `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`
pub fn swiglu_mlp(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    let gate = matmul(x, w_gate)?;
    let up = matmul(x, w_up)?;
    if gate.shape() != up.shape() {
        return Err(Error::shape("swiglu_mlp", gate.shape(), up.shape()));
    }
    let hidden: Vec<f64> = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(g, u)| silu(*g) * u)
        .collect();
    let hidden = Tensor::new(gate.shape().to_vec(), hidden)?;
    matmul(&hidden, w_down)
}
