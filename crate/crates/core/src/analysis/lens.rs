//! Logit lens on the two final streams: which stream's own prediction agrees
//! with the fused output.

use serde::{Deserialize, Serialize};

use crate::blocks::UNEMBED;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{matmul, rms_norm, Tensor};
use crate::topology::{model_forward, TokenBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub positions: usize,
    /// Fraction of positions where the X-stream argmax equals the fused argmax.
    pub match_x: f64,
    pub match_y: f64,
    /// Positions where the two streams' argmaxes differ.
    pub divergent_positions: usize,
    /// Among divergent positions, the fraction where X agrees with the fused output.
    pub divergent_align_x: f64,
    pub divergent_align_y: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn argmaxes(logits: &Tensor) -> Vec<usize> {
    let v = logits.last_dim();
    logits.data().chunks(v).map(argmax).collect()
}

/// Projects both final streams (each through a scale-free RMSNorm) onto the
/// vocabulary and compares their per-position argmax with that of
/// `fused_logits`. Inputs are `[positions, d]` (or with leading axes) and
/// `[positions, vocab]`.
pub fn logit_lens_match(x_final: &Tensor, y_final: &Tensor, fused_logits: &Tensor, unembed: &Tensor) -> Result<LensReport> {
    let positions = x_final.rows();
    if positions == 0 || x_final.numel() == 0 {
        return Err(Error::Contract("logit lens needs at least one position".into()));
    }
    if y_final.rows() != positions || fused_logits.rows() != positions {
        return Err(Error::shape("logit_lens_match", x_final.shape(), y_final.shape()));
    }
    let lens = |h: &Tensor| -> Result<Vec<usize>> {
        let flat = h.clone().reshape(&[positions, h.last_dim()])?;
        Ok(argmaxes(&matmul(&rms_norm(&flat, None, 0.0)?, unembed)?))
    };
    let ax = lens(x_final)?;
    let ay = lens(y_final)?;
    let af = argmaxes(fused_logits);
    let frac = |n: usize, of: usize| if of == 0 { 0.0 } else { n as f64 / of as f64 };
    let match_x = (0..positions).filter(|&p| ax[p] == af[p]).count();
    let match_y = (0..positions).filter(|&p| ay[p] == af[p]).count();
    let divergent: Vec<usize> = (0..positions).filter(|&p| ax[p] != ay[p]).collect();
    let align_x = divergent.iter().filter(|&&p| ax[p] == af[p]).count();
    let align_y = divergent.iter().filter(|&&p| ay[p] == af[p]).count();
    Ok(LensReport {
        positions,
        match_x: frac(match_x, positions),
        match_y: frac(match_y, positions),
        divergent_positions: divergent.len(),
        divergent_align_x: frac(align_x, divergent.len()),
        divergent_align_y: frac(align_y, divergent.len()),
    })
}

/// Runs the model on `tokens` and applies [`logit_lens_match`] to its final
/// streams.
pub fn lens_for_model(cfg: &ModelConfig, params: &ParamSet, tokens: &TokenBatch) -> Result<LensReport> {
    if !cfg.topology.is_two_stream() {
        return Err(Error::Contract(format!("{} has a single stream", cfg.topology)));
    }
    let out = model_forward(cfg, params, tokens)?;
    let last = out.trace.last().expect("trace has a terminal state");
    let y = last.y.as_ref().expect("two-stream trace");
    let logits = out.logits.reshape(&[tokens.rows(), cfg.vocab_size])?;
    logit_lens_match(&last.x, y, &logits, params.value(UNEMBED)?)
}
