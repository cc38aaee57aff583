//! Residual wiring of the shared blocks into the seven topologies.
//!
//! Sub-layer `i` (attention for even `i`, MLP for odd `i`) maps the stream
//! state `(X_i, Y_i)` to `(X_{i+1}, Y_{i+1})`:
//!
//! | kind               | update                                                            |
//! |--------------------|-------------------------------------------------------------------|
//! | pre-norm           | `X' = X + F(LN(X))`                                               |
//! | post-norm          | `X' = LN(X + F(X))`                                               |
//! | deep-norm          | `X' = LN(α X + F(X))`                                             |
//! | ResiDual           | `O = F(X)`, `X' = LN(X + O)`, `Y' = Y + O`                        |
//! | hybrid-norm        | `X' = LN_out(X + F(LN_in(X)))` after attention, `X + F(LN_in(X))` after MLP |
//! | siamese canonical  | `O = F(X + LN^Y(Y))`, `X' = LN^X(X + s O)`, `Y' = Y + O`          |
//! | siamese practical  | as canonical, `γ ⊙ X` at attention inputs, no `LN^X` after MLP     |
//!
//! The Siamese fused input optionally passes through an extra norm, and `s`
//! is `1/sqrt(i+1)` when depth scaling is on. Two-stream models start from
//! `X_0 = Y_0 = embedding` and emit `X_N + LN_final(Y_N)`.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    self, gamma_name, has_final_norm, norm_name, BlockNodes, FINAL_NORM, STREAM_X_INPUT, UNEMBED,
};
use crate::config::{is_attention_sublayer, ModelConfig, TopologyKind};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamSet};
use crate::tensor::{NodeId, Tape, Tensor};

/// Values of the two streams entering sub-layer `layer_index`, plus the
/// residual update that sub-layer produced. The terminal entry (index `N`)
/// has no update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub layer_index: usize,
    pub x: Tensor,
    pub y: Option<Tensor>,
    pub update: Option<Tensor>,
    /// Factor applied to the update on its way into the bounded stream.
    pub depth_scale: f64,
}

/// Tape handles of a [`StreamState`].
#[derive(Debug, Clone, Copy)]
pub struct StreamNodes {
    pub layer_index: usize,
    pub x: NodeId,
    pub y: Option<NodeId>,
    pub update: Option<NodeId>,
    pub depth_scale: f64,
}

impl StreamNodes {
    pub fn to_state(&self, tape: &Tape) -> StreamState {
        StreamState {
            layer_index: self.layer_index,
            x: tape.value(self.x).clone(),
            y: self.y.map(|y| tape.value(y).clone()),
            update: self.update.map(|o| tape.value(o).clone()),
            depth_scale: self.depth_scale,
        }
    }
}

/// Norm scales and mixing vectors bound for one sub-layer. Which fields are
/// present depends on the topology.
#[derive(Debug, Clone, Copy, Default)]
pub struct SublayerNorms {
    pub ln: Option<NodeId>,
    pub ln_in: Option<NodeId>,
    pub ln_out: Option<NodeId>,
    pub ln_x: Option<NodeId>,
    pub ln_y: Option<NodeId>,
    pub ln_fuse: Option<NodeId>,
    pub gamma: Option<NodeId>,
}

impl SublayerNorms {
    pub fn bind(bindings: &Bindings, i: usize) -> Self {
        let get = |n: &str| bindings.try_get(&norm_name(i, n));
        SublayerNorms {
            ln: get("ln"),
            ln_in: get("ln_in"),
            ln_out: get("ln_out"),
            ln_x: get("ln_x"),
            ln_y: get("ln_y"),
            ln_fuse: get("ln_fuse"),
            gamma: bindings.try_get(&gamma_name(i)),
        }
    }
}

fn need(slot: Option<NodeId>, what: &str, i: usize) -> Result<NodeId> {
    slot.ok_or_else(|| Error::Contract(format!("sub-layer {i} is missing its {what} parameter")))
}

/// Output of one sub-layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerStep {
    pub x: NodeId,
    pub y: Option<NodeId>,
    pub update: NodeId,
    pub depth_scale: f64,
}

/// Applies sub-layer `i` of `cfg.topology` to the stream state `(x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    i: usize,
    x: NodeId,
    y: Option<NodeId>,
    block: &BlockNodes,
    norms: &SublayerNorms,
    batch: usize,
    seq: usize,
) -> Result<LayerStep> {
    if i >= cfg.n_sublayers() {
        return Err(Error::Contract(format!("sub-layer {i} out of range for {} sub-layers", cfg.n_sublayers())));
    }
    let eps = cfg.norm_eps;
    let attn = is_attention_sublayer(i);
    let kind = cfg.topology;
    if kind.is_two_stream() != y.is_some() {
        return Err(Error::Contract(format!("{kind} expects the Y stream to be {}", if kind.is_two_stream() { "present" } else { "absent" })));
    }
    let single = |x: NodeId, update: NodeId| LayerStep {
        x,
        y: None,
        update,
        depth_scale: 1.0,
    };
    let step = match kind {
        TopologyKind::PreNorm => {
            let h = tape.rms_norm(x, Some(need(norms.ln, "ln", i)?), eps)?;
            let o = block.forward(tape, cfg, h, batch, seq)?;
            single(tape.add(x, o)?, o)
        }
        TopologyKind::PostNorm => {
            let o = block.forward(tape, cfg, x, batch, seq)?;
            let s = tape.add(x, o)?;
            single(tape.rms_norm(s, Some(need(norms.ln, "ln", i)?), eps)?, o)
        }
        TopologyKind::DeepNorm => {
            let o = block.forward(tape, cfg, x, batch, seq)?;
            let ax = tape.scale(x, cfg.deepnorm_alpha());
            let s = tape.add(ax, o)?;
            single(tape.rms_norm(s, Some(need(norms.ln, "ln", i)?), eps)?, o)
        }
        TopologyKind::HybridNorm => {
            let h = tape.rms_norm(x, Some(need(norms.ln_in, "ln_in", i)?), eps)?;
            let o = block.forward(tape, cfg, h, batch, seq)?;
            let s = tape.add(x, o)?;
            let x_next = if attn {
                tape.rms_norm(s, Some(need(norms.ln_out, "ln_out", i)?), eps)?
            } else {
                s
            };
            single(x_next, o)
        }
        TopologyKind::ResiDual => {
            let y = y.expect("checked above");
            let o = block.forward(tape, cfg, x, batch, seq)?;
            let s = tape.add(x, o)?;
            LayerStep {
                x: tape.rms_norm(s, Some(need(norms.ln, "ln", i)?), eps)?,
                y: Some(tape.add(y, o)?),
                update: o,
                depth_scale: 1.0,
            }
        }
        TopologyKind::SiameseCanonical | TopologyKind::SiamesePractical => {
            let y = y.expect("checked above");
            let practical = kind == TopologyKind::SiamesePractical;
            let y_normed = tape.rms_norm(y, Some(need(norms.ln_y, "ln_y", i)?), eps)?;
            let x_in = if practical && attn {
                tape.mul_row(x, need(norms.gamma, "gamma", i)?)?
            } else {
                x
            };
            let mut fused = tape.add(x_in, y_normed)?;
            if cfg.fused_input_norm {
                fused = tape.rms_norm(fused, Some(need(norms.ln_fuse, "ln_fuse", i)?), eps)?;
            }
            let o = block.forward(tape, cfg, fused, batch, seq)?;
            let s = cfg.depth_scale(i);
            let scaled = if s == 1.0 { o } else { tape.scale(o, s) };
            let sum = tape.add(x, scaled)?;
            let x_next = if practical && !attn {
                sum
            } else {
                tape.rms_norm(sum, Some(need(norms.ln_x, "ln_x", i)?), eps)?
            };
            LayerStep {
                x: x_next,
                y: Some(tape.add(y, o)?),
                update: o,
                depth_scale: s,
            }
        }
    };
    Ok(step)
}

/// A `batch × seq` grid of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::shape("TokenBatch", &[tokens.len()], &[batch, seq]));
        }
        Ok(TokenBatch { batch, seq, tokens })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Everything a forward pass left on the tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub bindings: Bindings,
    /// `[batch*seq, vocab]`
    pub logits: NodeId,
    /// Representation fed to the unembedding.
    pub output: NodeId,
    /// `N + 1` entries: the input of every sub-layer, then the final state.
    pub states: Vec<StreamNodes>,
}

impl TapeForward {
    pub fn trace(&self, tape: &Tape) -> Vec<StreamState> {
        self.states.iter().map(|s| s.to_state(tape)).collect()
    }
}

fn finite(tape: &Tape, id: NodeId) -> bool {
    tape.value(id).is_finite()
}

/// Runs the full model on `tape`, binding `params` as leaves.
pub fn forward_on_tape(tape: &mut Tape, cfg: &ModelConfig, params: &ParamSet, tokens: &TokenBatch) -> Result<TapeForward> {
    cfg.validate()?;
    let bindings = params.bind(tape);
    let (batch, seq) = (tokens.batch, tokens.seq);
    let e = blocks::embed(tape, cfg, &bindings, &tokens.tokens, batch, seq)?;
    // Y_0 gets its own node so its adjoint excludes the X path.
    let shape = tape.shape(e).to_vec();
    let (mut x, mut y) = if cfg.topology.is_siamese() {
        let g = bindings.get(STREAM_X_INPUT)?;
        (tape.scale_by(e, g)?, Some(tape.reshape(e, &shape)?))
    } else if cfg.topology.is_two_stream() {
        (e, Some(tape.reshape(e, &shape)?))
    } else {
        (e, None)
    };

    let mut states = Vec::with_capacity(cfg.n_sublayers() + 1);
    let diverged = |tape: &Tape, states: &[StreamNodes], i: Option<usize>, what: &str| Error::Diverged {
        sublayer: i,
        what: what.to_string(),
        trace: Box::new(states.iter().map(|s| s.to_state(tape)).collect()),
    };
    if !finite(tape, x) {
        return Err(diverged(tape, &states, None, "non-finite embedding"));
    }
    for i in 0..cfg.n_sublayers() {
        let block = BlockNodes::bind(&bindings, i)?;
        let norms = SublayerNorms::bind(&bindings, i);
        let step = layer_forward(tape, cfg, i, x, y, &block, &norms, batch, seq)?;
        states.push(StreamNodes {
            layer_index: i,
            x,
            y,
            update: Some(step.update),
            depth_scale: step.depth_scale,
        });
        if !finite(tape, step.x) || !step.y.is_none_or(|y| finite(tape, y)) {
            return Err(diverged(tape, &states, Some(i), "non-finite stream state"));
        }
        x = step.x;
        y = step.y;
    }
    states.push(StreamNodes {
        layer_index: cfg.n_sublayers(),
        x,
        y,
        update: None,
        depth_scale: 1.0,
    });

    let output = match (cfg.topology, y) {
        (kind, Some(y)) if kind.is_two_stream() => {
            let fy = tape.rms_norm(y, Some(bindings.get(FINAL_NORM)?), cfg.norm_eps)?;
            tape.add(x, fy)?
        }
        (kind, _) if has_final_norm(kind) => tape.rms_norm(x, Some(bindings.get(FINAL_NORM)?), cfg.norm_eps)?,
        _ => x,
    };
    let logits = tape.matmul(output, bindings.get(UNEMBED)?)?;
    if !finite(tape, logits) {
        return Err(diverged(tape, &states, None, "non-finite logits"));
    }
    Ok(TapeForward {
        bindings,
        logits,
        output,
        states,
    })
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    pub trace: Vec<StreamState>,
}

/// Pure forward pass: logits plus the full stream trace.
pub fn model_forward(cfg: &ModelConfig, params: &ParamSet, tokens: &TokenBatch) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, cfg, params, tokens)?;
    let logits = tape
        .value(fwd.logits)
        .clone()
        .reshape(&[tokens.batch, tokens.seq, cfg.vocab_size])?;
    Ok(ModelOutput {
        logits,
        trace: fwd.trace(&tape),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Silence the bounded stream: zero every `LN^X` scale and the bounded
    /// stream's input gain.
    ToPreNorm,
    /// Silence the unbounded stream's contributions: zero every `LN^Y` scale
    /// and the final norm.
    ToPostNorm,
}

/// Zeroes the scales that collapse a canonical Siamese model onto one of its
/// single-stream special cases.
pub fn apply_reduction(cfg: &ModelConfig, params: &ParamSet, target: Reduction) -> Result<ParamSet> {
    if cfg.topology != TopologyKind::SiameseCanonical || cfg.fused_input_norm || cfg.depth_scaling {
        return Err(Error::Contract(
            "reductions apply to siamese_canonical without fused-input norm or depth scaling".into(),
        ));
    }
    let mut out = params.clone();
    let mut zero = |name: &str| -> Result<()> {
        out.value_mut(name)?.data_mut().fill(0.0);
        Ok(())
    };
    for i in 0..cfg.n_sublayers() {
        match target {
            Reduction::ToPreNorm => zero(&norm_name(i, "ln_x"))?,
            Reduction::ToPostNorm => zero(&norm_name(i, "ln_y"))?,
        }
    }
    match target {
        Reduction::ToPreNorm => zero(STREAM_X_INPUT)?,
        Reduction::ToPostNorm => zero(FINAL_NORM)?,
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::init_params;

    fn batch(cfg: &ModelConfig) -> TokenBatch {
        let t = (0..2 * cfg.seq_len).map(|i| (i * 5 + 1) % cfg.vocab_size).collect();
        TokenBatch::new(2, cfg.seq_len, t).unwrap()
    }

    #[test]
    fn every_topology_runs_and_traces_every_sublayer() {
        for kind in TopologyKind::ALL {
            let cfg = ModelConfig::tiny(kind);
            let params = init_params(&cfg).unwrap();
            let out = model_forward(&cfg, &params, &batch(&cfg)).unwrap();
            assert_eq!(out.logits.shape(), &[2, cfg.seq_len, cfg.vocab_size]);
            assert_eq!(out.trace.len(), cfg.n_sublayers() + 1);
            for s in &out.trace {
                assert_eq!(s.y.is_some(), kind.is_two_stream());
            }
        }
    }

    #[test]
    fn two_stream_kinds_start_from_the_embedding() {
        for kind in [TopologyKind::ResiDual, TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
            let cfg = ModelConfig::tiny(kind);
            let out = model_forward(&cfg, &init_params(&cfg).unwrap(), &batch(&cfg)).unwrap();
            assert_eq!(Some(&out.trace[0].x), out.trace[0].y.as_ref());
        }
    }

    #[test]
    fn zero_update_reductions_of_single_layers() {
        // Pre-norm with F ≡ 0 leaves X untouched; canonical siamese maps
        // (X, Y) to (LN^X(X), Y).
        for kind in [TopologyKind::PreNorm, TopologyKind::SiameseCanonical] {
            let cfg = ModelConfig::tiny(kind);
            let mut params = init_params(&cfg).unwrap();
            for l in 0..cfg.n_layers {
                params.value_mut(&format!("layer.{l}.attn.w_o")).unwrap().data_mut().fill(0.0);
                params.value_mut(&format!("layer.{l}.mlp.w_down")).unwrap().data_mut().fill(0.0);
            }
            let out = model_forward(&cfg, &params, &batch(&cfg)).unwrap();
            for w in out.trace.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                match kind {
                    TopologyKind::PreNorm => assert_eq!(a.x, b.x),
                    _ => {
                        assert_eq!(a.y, b.y);
                        let ln = crate::tensor::rms_norm(&a.x, Some(params.value(&norm_name(a.layer_index, "ln_x")).unwrap()), cfg.norm_eps).unwrap();
                        assert_eq!(ln, b.x);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_layer_model_is_unembedded_final_norm_of_embedding() {
        let mut cfg = ModelConfig::tiny(TopologyKind::PreNorm);
        cfg.n_layers = 0;
        let params = init_params(&cfg).unwrap();
        let b = batch(&cfg);
        let out = model_forward(&cfg, &params, &b).unwrap();
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let e = blocks::embed(&mut tape, &cfg, &bind, &b.tokens, b.batch, b.seq).unwrap();
        let n = crate::tensor::rms_norm(tape.value(e), Some(params.value(FINAL_NORM).unwrap()), cfg.norm_eps).unwrap();
        let expect = crate::tensor::matmul(&n, params.value(UNEMBED).unwrap()).unwrap();
        assert_eq!(out.logits.data(), expect.data());
    }

    #[test]
    fn reductions_reject_other_topologies() {
        let cfg = ModelConfig::tiny(TopologyKind::SiamesePractical);
        let params = init_params(&cfg).unwrap();
        assert!(matches!(apply_reduction(&cfg, &params, Reduction::ToPreNorm), Err(Error::Contract(_))));
        let mut cfg = ModelConfig::tiny(TopologyKind::SiameseCanonical);
        cfg.depth_scaling = true;
        let params = init_params(&cfg).unwrap();
        assert!(apply_reduction(&cfg, &params, Reduction::ToPostNorm).is_err());
    }

    #[test]
    fn divergence_keeps_the_partial_trace() {
        let cfg = ModelConfig::tiny(TopologyKind::PreNorm);
        let mut params = init_params(&cfg).unwrap();
        params.value_mut("layer.0.mlp.w_down").unwrap().data_mut()[0] = f64::INFINITY;
        match model_forward(&cfg, &params, &batch(&cfg)) {
            Err(Error::Diverged { sublayer, trace, .. }) => {
                assert_eq!(sublayer, Some(1));
                assert_eq!(trace.len(), 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let cfg = ModelConfig::tiny(TopologyKind::PostNorm);
        let params = init_params(&cfg).unwrap();
        let long = TokenBatch::new(1, cfg.seq_len + 1, vec![0; cfg.seq_len + 1]).unwrap();
        assert!(model_forward(&cfg, &params, &long).is_err());
    }
}
