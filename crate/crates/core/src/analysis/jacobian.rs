//! Per-sub-layer Jacobians of the stream map `(X_i, Y_i) -> (X_{i+1}, Y_{i+1})`
//! at a single token position.
//!
//! The assembled form is built from the Jacobians of the pieces of one
//! sub-layer, each obtained exactly by reverse mode:
//!
//! ```text
//! dXX = J_LNX (I + s J_F G)      dXY = s J_LNX J_F J_LNY
//! dYX = J_F G                    dYY = I + J_F J_LNY
//! ```
//!
//! where `G` is the γ mixing (identity when absent), `J_F` includes the
//! optional fused-input norm, and ResiDual is the case `J_LNY = 0`.
//! Single-stream kinds use `J_P (a I + J_F J_Q)` with `Q` the pre-branch
//! norm and `P` the main-path norm (identity when absent). The brute-force
//! form differentiates the whole sub-layer by central differences.

use serde::{Deserialize, Serialize};

use crate::blocks::{gamma_name, norm_name, BlockNodes};
use crate::config::{is_attention_sublayer, ModelConfig, TopologyKind};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamSet};
use crate::parallel::{map, Execution};
use crate::tensor::{central_jacobian, matmul, NodeId, Tape, Tensor};
use crate::topology::{layer_forward, model_forward, StreamState, SublayerNorms, TokenBatch};

/// Largest model width the Jacobian harness accepts.
pub const MAX_JACOBIAN_WIDTH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian {
    pub layer_index: usize,
    /// `∂X'/∂X`; the whole Jacobian for single-stream kinds.
    pub dxx: Tensor,
    pub dxy: Option<Tensor>,
    pub dyx: Option<Tensor>,
    pub dyy: Option<Tensor>,
    /// `[[dXX, dXY], [dYX, dYY]]`, or `dXX` alone for single-stream kinds.
    pub assembled: Tensor,
}

fn identity(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

fn diag(v: &[f64]) -> Tensor {
    let d = v.len();
    let mut t = Tensor::zeros(&[d, d]);
    for (i, x) in v.iter().enumerate() {
        t.data_mut()[i * d + i] = *x;
    }
    t
}

fn plus(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

fn times(a: &Tensor, c: f64) -> Tensor {
    let mut out = a.clone();
    out.scale_in_place(c);
    out
}

fn mm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, b)
}

/// Places four `d×d` blocks into one `2d×2d` matrix.
pub fn assemble_blocks(xx: &Tensor, xy: &Tensor, yx: &Tensor, yy: &Tensor) -> Tensor {
    let d = xx.shape()[0];
    let mut out = vec![0.0; 4 * d * d];
    for r in 0..d {
        for (c, blocks) in [(0, [xx, yx]), (d, [xy, yy])] {
            out[r * 2 * d + c..r * 2 * d + c + d].copy_from_slice(blocks[0].row(r));
            out[(r + d) * 2 * d + c..(r + d) * 2 * d + c + d].copy_from_slice(blocks[1].row(r));
        }
    }
    Tensor::new(vec![2 * d, 2 * d], out).expect("block sizes")
}

/// Value and exact Jacobian of `f` at `at`, one reverse sweep per output.
fn reverse_jacobian<F>(params: &ParamSet, at: &[f64], f: F) -> Result<(Vec<f64>, Tensor)>
where
    F: Fn(&mut Tape, &Bindings, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let n_in = at.len();
    let x = tape.leaf(Tensor::new(vec![1, n_in], at.to_vec())?);
    let out = f(&mut tape, &bindings, x)?;
    let value = tape.value(out).data().to_vec();
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::diverged(None, "non-finite value inside a sub-layer"));
    }
    let mut jac = vec![0.0; value.len() * n_in];
    for r in 0..value.len() {
        let mut seed = Tensor::zeros(tape.shape(out));
        seed.data_mut()[r] = 1.0;
        let g = tape.vjp(out, seed)?;
        jac[r * n_in..(r + 1) * n_in].copy_from_slice(g.get_or_zeros(x, &[1, n_in]).data());
    }
    let jac = Tensor::new(vec![value.len(), n_in], jac)?;
    Ok((value, jac))
}

fn norm_jacobian(cfg: &ModelConfig, params: &ParamSet, name: Option<String>, at: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    match name {
        None => Ok((at.to_vec(), identity(at.len()))),
        Some(name) => reverse_jacobian(params, at, |tape, b, x| tape.rms_norm(x, Some(b.get(&name)?), cfg.norm_eps)),
    }
}

fn check_state(cfg: &ModelConfig, state: &StreamState) -> Result<usize> {
    if state.x.rows() != 1 {
        return Err(Error::Contract(format!(
            "Jacobians are taken at a single token position, got {} rows",
            state.x.rows()
        )));
    }
    if cfg.d_model > MAX_JACOBIAN_WIDTH {
        return Err(Error::Contract(format!("d_model {} exceeds {MAX_JACOBIAN_WIDTH}", cfg.d_model)));
    }
    if state.layer_index >= cfg.n_sublayers() {
        return Err(Error::Contract(format!("state {} is not the input of a sub-layer", state.layer_index)));
    }
    if state.y.is_some() != cfg.topology.is_two_stream() {
        return Err(Error::Contract(format!("state does not match the {} stream layout", cfg.topology)));
    }
    Ok(state.layer_index)
}

/// Assembles the sub-layer Jacobian at `state` from its pieces.
pub fn block_jacobian_assembled(cfg: &ModelConfig, params: &ParamSet, state: &StreamState) -> Result<BlockJacobian> {
    let i = check_state(cfg, state)?;
    let d = cfg.d_model;
    let x = state.x.data();
    let eye = identity(d);
    let attn = is_attention_sublayer(i);
    let has = |n: &str| params.contains(&norm_name(i, n));
    let block_jacobian = |input: &[f64], fuse: Option<String>| {
        reverse_jacobian(params, input, |tape, b, u| {
            let u = match &fuse {
                Some(name) => tape.rms_norm(u, Some(b.get(name)?), cfg.norm_eps)?,
                None => u,
            };
            BlockNodes::bind(b, i)?.forward(tape, cfg, u, 1, 1)
        })
    };

    if let Some(y) = &state.y {
        let y = y.data();
        let siamese = cfg.topology.is_siamese();
        let (y_normed, j_lny) = if siamese {
            norm_jacobian(cfg, params, Some(norm_name(i, "ln_y")), y)?
        } else {
            (vec![0.0; d], Tensor::zeros(&[d, d]))
        };
        let gamma = if cfg.topology == TopologyKind::SiamesePractical && attn {
            params.value(&gamma_name(i))?.data().to_vec()
        } else {
            vec![1.0; d]
        };
        let fused: Vec<f64> = (0..d).map(|k| gamma[k] * x[k] + y_normed[k]).collect();
        let fuse_norm = (siamese && cfg.fused_input_norm).then(|| norm_name(i, "ln_fuse"));
        let (update, j_f) = block_jacobian(&fused, fuse_norm)?;
        let s = cfg.depth_scale(i);
        let pre: Vec<f64> = (0..d).map(|k| x[k] + s * update[k]).collect();
        let x_norm = if siamese {
            has("ln_x").then(|| norm_name(i, "ln_x"))
        } else {
            Some(norm_name(i, "ln"))
        };
        let (_, j_lnx) = norm_jacobian(cfg, params, x_norm, &pre)?;
        let g = diag(&gamma);
        let jfg = mm(&j_f, &g)?;
        let dxx = mm(&j_lnx, &plus(&eye, &times(&jfg, s))?)?;
        let dxy = times(&mm(&mm(&j_lnx, &j_f)?, &j_lny)?, s);
        let dyy = plus(&eye, &mm(&j_f, &j_lny)?)?;
        let assembled = assemble_blocks(&dxx, &dxy, &jfg, &dyy);
        return Ok(BlockJacobian {
            layer_index: i,
            dxx,
            dxy: Some(dxy),
            dyx: Some(jfg),
            dyy: Some(dyy),
            assembled,
        });
    }

    let (pre_norm, residual_gain, post_norm) = match cfg.topology {
        TopologyKind::PreNorm => (Some("ln"), 1.0, None),
        TopologyKind::PostNorm => (None, 1.0, Some("ln")),
        TopologyKind::DeepNorm => (None, cfg.deepnorm_alpha(), Some("ln")),
        TopologyKind::HybridNorm => (Some("ln_in"), 1.0, attn.then_some("ln_out")),
        kind => unreachable!("{kind} is two-stream"),
    };
    let (branch_in, j_q) = norm_jacobian(cfg, params, pre_norm.map(|n| norm_name(i, n)), x)?;
    let (update, j_f) = block_jacobian(&branch_in, None)?;
    let pre: Vec<f64> = (0..d).map(|k| residual_gain * x[k] + update[k]).collect();
    let (_, j_p) = norm_jacobian(cfg, params, post_norm.map(|n| norm_name(i, n)), &pre)?;
    let dxx = mm(&j_p, &plus(&times(&eye, residual_gain), &mm(&j_f, &j_q)?)?)?;
    Ok(BlockJacobian {
        layer_index: i,
        assembled: dxx.clone(),
        dxx,
        dxy: None,
        dyx: None,
        dyy: None,
    })
}

fn sublayer_map(cfg: &ModelConfig, params: &ParamSet, i: usize, v: &[f64]) -> Result<Vec<f64>> {
    let d = cfg.d_model;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let x = tape.leaf(Tensor::new(vec![1, d], v[..d].to_vec())?);
    let y = if cfg.topology.is_two_stream() {
        Some(tape.leaf(Tensor::new(vec![1, d], v[d..].to_vec())?))
    } else {
        None
    };
    let block = BlockNodes::bind(&b, i)?;
    let norms = SublayerNorms::bind(&b, i);
    let step = layer_forward(&mut tape, cfg, i, x, y, &block, &norms, 1, 1)?;
    let mut out = tape.value(step.x).data().to_vec();
    if let Some(y) = step.y {
        out.extend_from_slice(tape.value(y).data());
    }
    Ok(out)
}

/// Central-difference Jacobian of the whole sub-layer at `state`.
pub fn jacobian_bruteforce(exec: Execution, cfg: &ModelConfig, params: &ParamSet, state: &StreamState, h: f64) -> Result<Tensor> {
    let i = check_state(cfg, state)?;
    let mut at = state.x.data().to_vec();
    if let Some(y) = &state.y {
        at.extend_from_slice(y.data());
    }
    central_jacobian(exec, |v| sublayer_map(cfg, params, i, v), &at, h)
}

/// One sub-layer's comparison of the two Jacobians.
#[derive(Debug, Clone)]
pub struct JacobianCheck {
    pub assembled: BlockJacobian,
    pub bruteforce: Tensor,
    pub max_abs_diff: f64,
}

/// Runs a one-token forward pass and compares both Jacobians at the input
/// of every sub-layer.
pub fn verify_layer_jacobians(exec: Execution, cfg: &ModelConfig, params: &ParamSet, token: usize, h: f64) -> Result<Vec<JacobianCheck>> {
    let out = model_forward(cfg, params, &TokenBatch::new(1, 1, vec![token])?)?;
    out.trace[..cfg.n_sublayers()]
        .iter()
        .map(|state| {
            let assembled = block_jacobian_assembled(cfg, params, state)?;
            let bruteforce = jacobian_bruteforce(exec, cfg, params, state, h)?;
            let max_abs_diff = assembled.assembled.max_abs_diff(&bruteforce);
            Ok(JacobianCheck {
                assembled,
                bruteforce,
                max_abs_diff,
            })
        })
        .collect()
}

/// Moves every norm scale and γ entry to a seeded value in `[1 - spread, 1 + spread]`
/// so Jacobian checks do not sit at the symmetric all-ones init.
pub fn perturb_norm_scales(params: &mut ParamSet, seed: u64, spread: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ca1e);
    for p in params.iter_mut() {
        if p.trainable && (p.name.ends_with(".scale") || p.name.ends_with(".gamma")) {
            for v in p.value.data_mut() {
                *v = 1.0 + rng.gen_range(-spread..=spread);
            }
        }
    }
}

/// Worst assembled-vs-brute-force gap over all sub-layers for each seed,
/// with norm scales perturbed by the seed.
pub fn jacobian_gap_over_seeds(exec: Execution, cfg: &ModelConfig, seeds: &[u64], h: f64) -> Vec<Result<f64>> {
    map(exec, seeds.to_vec(), |seed| {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let mut params = crate::blocks::init_params(&cfg)?;
        perturb_norm_scales(&mut params, seed, 0.5);
        let token = (seed as usize * 7 + 3) % cfg.vocab_size;
        let checks = verify_layer_jacobians(Execution::Sequential, &cfg, &params, token, h)?;
        Ok(checks.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max))
    })
}

/// Serialisable record of one sub-layer's Jacobians.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JacobianLayerRecord {
    pub layer_index: usize,
    pub max_abs_diff: f64,
    pub assembled: Vec<Vec<f64>>,
    pub bruteforce: Vec<Vec<f64>>,
}

/// JSON dump of a Jacobian verification run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JacobianReport {
    pub kind: TopologyKind,
    pub d: usize,
    pub seed: u64,
    pub depth_scaling: bool,
    pub fused_input_norm: bool,
    pub layers: Vec<JacobianLayerRecord>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

impl JacobianReport {
    pub fn new(cfg: &ModelConfig, checks: &[JacobianCheck]) -> Self {
        JacobianReport {
            kind: cfg.topology,
            d: cfg.d_model,
            seed: cfg.seed,
            depth_scaling: cfg.depth_scaling,
            fused_input_norm: cfg.fused_input_norm,
            layers: checks
                .iter()
                .map(|c| JacobianLayerRecord {
                    layer_index: c.assembled.layer_index,
                    max_abs_diff: c.max_abs_diff,
                    assembled: rows_of(&c.assembled.assembled),
                    bruteforce: rows_of(&c.bruteforce),
                })
                .collect(),
        }
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.layers.iter().map(|l| l.max_abs_diff).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::init_params;

    fn cfg(kind: TopologyKind) -> ModelConfig {
        ModelConfig {
            d_model: 4,
            ..ModelConfig::tiny(kind)
        }
    }

    #[test]
    fn assembled_matches_bruteforce_for_every_kind() {
        for kind in TopologyKind::ALL {
            let cfg = cfg(kind);
            let mut params = init_params(&cfg).unwrap();
            perturb_norm_scales(&mut params, 1, 0.5);
            for c in verify_layer_jacobians(Execution::Sequential, &cfg, &params, 3, 1e-6).unwrap() {
                assert!(c.max_abs_diff <= 1e-6, "{kind} sub-layer {}: {}", c.assembled.layer_index, c.max_abs_diff);
            }
        }
    }

    #[test]
    fn multi_token_states_are_rejected() {
        let cfg = cfg(TopologyKind::SiameseCanonical);
        let params = init_params(&cfg).unwrap();
        let out = model_forward(&cfg, &params, &TokenBatch::new(1, 2, vec![1, 2]).unwrap()).unwrap();
        assert!(matches!(block_jacobian_assembled(&cfg, &params, &out.trace[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn block_layout() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let c = Tensor::full(&[2, 2], 3.0);
        let d = Tensor::full(&[2, 2], 4.0);
        let m = assemble_blocks(&a, &b, &c, &d);
        assert_eq!(m.row(0), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(m.row(3), &[3.0, 3.0, 4.0, 4.0]);
    }
}
