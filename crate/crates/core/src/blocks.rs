//! The residual transformations shared by every topology (causal multi-head
//! attention and a SwiGLU MLP), token/position embedding, and parameter
//! initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{is_attention_sublayer, ModelConfig, TopologyKind};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamSet};
use crate::tensor::{NodeId, Tape, Tensor};

/// Which residual transformation a sub-layer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Attention,
    Mlp,
}

impl BlockKind {
    pub fn of_sublayer(i: usize) -> Self {
        if is_attention_sublayer(i) {
            BlockKind::Attention
        } else {
            BlockKind::Mlp
        }
    }

    fn tag(self) -> &'static str {
        match self {
            BlockKind::Attention => "attn",
            BlockKind::Mlp => "mlp",
        }
    }
}

/// Parameter-name prefix of sub-layer `i`, e.g. `layer.1.mlp`.
pub fn sublayer_prefix(i: usize) -> String {
    format!("layer.{}.{}", i / 2, BlockKind::of_sublayer(i).tag())
}

/// Name of the scale vector of norm `norm` (`ln`, `ln_x`, ...) in sub-layer `i`.
pub fn norm_name(i: usize, norm: &str) -> String {
    format!("{}.{norm}.scale", sublayer_prefix(i))
}

pub fn gamma_name(i: usize) -> String {
    format!("{}.gamma", sublayer_prefix(i))
}

pub const EMBED_TOKENS: &str = "embed.tok";
pub const EMBED_POSITIONS: &str = "embed.pos";
pub const FINAL_NORM: &str = "final_norm.scale";
pub const UNEMBED: &str = "unembed";
/// Frozen gain on the bounded stream's initial state (`X_0 = g · input`).
pub const STREAM_X_INPUT: &str = "stream.x_in";

/// Names of the norm scales and mixing vectors a topology places at
/// sub-layer `i` (everything except the block weights).
pub fn sublayer_norms(cfg: &ModelConfig, i: usize) -> Vec<String> {
    let attn = is_attention_sublayer(i);
    let mut names = Vec::new();
    match cfg.topology {
        TopologyKind::PreNorm | TopologyKind::PostNorm | TopologyKind::DeepNorm | TopologyKind::ResiDual => {
            names.push(norm_name(i, "ln"));
        }
        TopologyKind::HybridNorm => {
            names.push(norm_name(i, "ln_in"));
            if attn {
                names.push(norm_name(i, "ln_out"));
            }
        }
        TopologyKind::SiameseCanonical => {
            names.push(norm_name(i, "ln_x"));
            names.push(norm_name(i, "ln_y"));
            if cfg.fused_input_norm {
                names.push(norm_name(i, "ln_fuse"));
            }
        }
        TopologyKind::SiamesePractical => {
            if attn {
                names.push(norm_name(i, "ln_x"));
                names.push(gamma_name(i));
            }
            names.push(norm_name(i, "ln_y"));
            if cfg.fused_input_norm {
                names.push(norm_name(i, "ln_fuse"));
            }
        }
    }
    names
}

/// Whether the topology ends with a final norm (applied to the main path for
/// Pre-Norm, to `Y_N` for two-stream kinds).
pub fn has_final_norm(kind: TopologyKind) -> bool {
    matches!(kind, TopologyKind::PreNorm) || kind.is_two_stream()
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 3.0 * std {
                break v;
            }
        })
        .collect()
}

/// Builds a fresh parameter set: weights from a normal with std
/// `1/sqrt(d_model)` truncated at ±3σ, every norm scale and γ at 1.0.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.d_model;
    let h = cfg.ffn_hidden();
    let hd = cfg.head_dim();
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weight = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), truncated_normal(&mut rng, std, n))
    };

    let mut p = ParamSet::new();
    p.insert(EMBED_TOKENS, weight(&[cfg.vocab_size, d])?)?;
    p.insert(EMBED_POSITIONS, weight(&[cfg.seq_len, d])?)?;
    if cfg.topology.is_siamese() {
        p.insert_frozen(STREAM_X_INPUT, Tensor::ones(&[1]))?;
    }

    let beta = if cfg.topology == TopologyKind::DeepNorm {
        cfg.deepnorm_beta()
    } else {
        1.0
    };
    for l in 0..cfg.n_layers {
        let a = format!("layer.{l}.attn");
        p.insert(format!("{a}.w_q"), weight(&[d, d])?)?;
        p.insert(format!("{a}.w_k"), weight(&[d, d])?)?;
        let mut w_v = weight(&[d, d])?;
        let mut w_o = weight(&[d, d])?;
        w_v.scale_in_place(beta);
        w_o.scale_in_place(beta);
        p.insert(format!("{a}.w_v"), w_v)?;
        p.insert(format!("{a}.w_o"), w_o)?;
        if cfg.qk_norm {
            p.insert(format!("{a}.q_norm.scale"), Tensor::ones(&[hd]))?;
            p.insert(format!("{a}.k_norm.scale"), Tensor::ones(&[hd]))?;
        }
        let m = format!("layer.{l}.mlp");
        for (name, shape) in [("w_gate", [d, h]), ("w_up", [d, h]), ("w_down", [h, d])] {
            let mut w = weight(&shape)?;
            w.scale_in_place(beta);
            p.insert(format!("{m}.{name}"), w)?;
        }
        for i in [2 * l, 2 * l + 1] {
            for name in sublayer_norms(cfg, i) {
                p.insert(name, Tensor::ones(&[d]))?;
            }
        }
    }
    if has_final_norm(cfg.topology) {
        p.insert(FINAL_NORM, Tensor::ones(&[d]))?;
    }
    p.insert(UNEMBED, weight(&[d, cfg.vocab_size])?)?;
    Ok(p)
}

/// Tape handles for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub q_norm: Option<NodeId>,
    pub k_norm: Option<NodeId>,
}

/// Tape handles for one SwiGLU MLP block.
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w_gate: NodeId,
    pub w_up: NodeId,
    pub w_down: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub enum BlockNodes {
    Attention(AttentionNodes),
    Mlp(MlpNodes),
}

impl BlockNodes {
    pub fn bind(bindings: &Bindings, i: usize) -> Result<Self> {
        let p = sublayer_prefix(i);
        let get = |s: &str| bindings.get(&format!("{p}.{s}"));
        Ok(match BlockKind::of_sublayer(i) {
            BlockKind::Attention => BlockNodes::Attention(AttentionNodes {
                w_q: get("w_q")?,
                w_k: get("w_k")?,
                w_v: get("w_v")?,
                w_o: get("w_o")?,
                q_norm: bindings.try_get(&format!("{p}.q_norm.scale")),
                k_norm: bindings.try_get(&format!("{p}.k_norm.scale")),
            }),
            BlockKind::Mlp => BlockNodes::Mlp(MlpNodes {
                w_gate: get("w_gate")?,
                w_up: get("w_up")?,
                w_down: get("w_down")?,
            }),
        })
    }

    /// Applies the block to `x` (`[batch*seq, d]`).
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, x: NodeId, batch: usize, seq: usize) -> Result<NodeId> {
        match self {
            BlockNodes::Attention(a) => attention_forward(tape, cfg, a, x, batch, seq),
            BlockNodes::Mlp(m) => mlp_forward(tape, m, x),
        }
    }
}

fn head_norm(tape: &mut Tape, cfg: &ModelConfig, x: NodeId, scale: NodeId, rows: usize) -> Result<NodeId> {
    let hd = cfg.head_dim();
    let split = tape.reshape(x, &[rows * cfg.n_heads, hd])?;
    let normed = tape.rms_norm(split, Some(scale), cfg.norm_eps)?;
    tape.reshape(normed, &[rows, cfg.d_model])
}

/// Causal scaled dot-product attention followed by the output projection.
pub fn attention_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &AttentionNodes,
    x: NodeId,
    batch: usize,
    seq: usize,
) -> Result<NodeId> {
    if seq > cfg.seq_len {
        return Err(Error::Contract(format!(
            "sequence length {seq} exceeds the configured maximum {}",
            cfg.seq_len
        )));
    }
    let mut q = tape.matmul(x, p.w_q)?;
    let mut k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    if let (Some(qs), Some(ks)) = (p.q_norm, p.k_norm) {
        q = head_norm(tape, cfg, q, qs, batch * seq)?;
        k = head_norm(tape, cfg, k, ks, batch * seq)?;
    }
    let ctx = tape.causal_attention(q, k, v, batch, seq, cfg.n_heads)?;
    tape.matmul(ctx, p.w_o)
}

/// `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`
pub fn mlp_forward(tape: &mut Tape, p: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let gate = tape.matmul(x, p.w_gate)?;
    let act = tape.silu(gate);
    let up = tape.matmul(x, p.w_up)?;
    let hidden = tape.mul(act, up)?;
    tape.matmul(hidden, p.w_down)
}

/// Token plus learned absolute position embedding for a row-major
/// `batch × seq` token grid, optionally followed by a scale-free RMSNorm.
pub fn embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bindings: &Bindings,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<NodeId> {
    if tokens.len() != batch * seq {
        return Err(Error::shape("embed", &[tokens.len()], &[batch, seq]));
    }
    if seq > cfg.seq_len {
        return Err(Error::Contract(format!(
            "sequence length {seq} exceeds the configured maximum {}",
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token",
            index: bad,
            bound: cfg.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.gather_rows(bindings.get(EMBED_TOKENS)?, tokens)?;
    let pos = tape.gather_rows(bindings.get(EMBED_POSITIONS)?, &positions)?;
    let x = tape.add(tok, pos)?;
    if cfg.embed_norm {
        tape.rms_norm(x, None, cfg.norm_eps)
    } else {
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_scales_start_at_one() {
        for kind in TopologyKind::ALL {
            let mut cfg = ModelConfig::tiny(kind);
            cfg.fused_input_norm = true;
            cfg.qk_norm = true;
            let a = init_params(&cfg).unwrap();
            let b = init_params(&cfg).unwrap();
            assert_eq!(a, b);
            for p in a.iter() {
                if p.name.ends_with(".scale") || p.name.ends_with(".gamma") {
                    assert!(p.value.data().iter().all(|v| *v == 1.0), "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn siamese_parameter_overhead_is_only_norms() {
        for n_layers in 1..5 {
            for kind in [TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
                for fused in [false, true] {
                    let mut cfg = ModelConfig::tiny(kind);
                    cfg.n_layers = n_layers;
                    cfg.fused_input_norm = fused;
                    let mut pre = cfg.clone();
                    pre.topology = TopologyKind::PreNorm;
                    let excess = init_params(&cfg).unwrap().num_values() - init_params(&pre).unwrap().num_values();
                    assert!(excess < 3 * (2 * n_layers + 1) * cfg.d_model, "{kind} {n_layers} {excess}");
                }
            }
        }
    }

    #[test]
    fn deepnorm_rescales_value_and_output_weights() {
        let cfg = ModelConfig::tiny(TopologyKind::DeepNorm);
        let mut plain = cfg.clone();
        plain.topology = TopologyKind::PostNorm;
        let (a, b) = (init_params(&cfg).unwrap(), init_params(&plain).unwrap());
        let beta = cfg.deepnorm_beta();
        for name in ["layer.0.attn.w_v", "layer.1.mlp.w_down"] {
            let (x, y) = (a.value(name).unwrap(), b.value(name).unwrap());
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q * beta).abs() < 1e-15));
        }
        assert_eq!(a.value("layer.0.attn.w_q").unwrap(), b.value("layer.0.attn.w_q").unwrap());
    }

    #[test]
    fn embedding_without_norm_is_table_plus_position() {
        let cfg = ModelConfig::tiny(TopologyKind::PreNorm);
        let params = init_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = embed(&mut tape, &cfg, &b, &[3, 7], 1, 2).unwrap();
        let tok = params.value(EMBED_TOKENS).unwrap();
        let pos = params.value(EMBED_POSITIONS).unwrap();
        for (t, &id) in [3usize, 7].iter().enumerate() {
            let expect: Vec<f64> = tok.row(id).iter().zip(pos.row(t)).map(|(a, b)| a + b).collect();
            assert_eq!(tape.value(x).row(t), expect.as_slice());
        }
        assert!(matches!(embed(&mut tape, &cfg, &b, &[11], 1, 1), Err(Error::Index { .. })));
    }

    #[test]
    fn embed_norm_on_a_unit_rms_row_is_a_no_op() {
        let mut cfg = ModelConfig::tiny(TopologyKind::PreNorm);
        cfg.d_model = 4;
        cfg.n_heads = 1;
        cfg.embed_norm = true;
        let mut params = init_params(&cfg).unwrap();
        params.value_mut(EMBED_TOKENS).unwrap().data_mut().fill(0.5);
        params.value_mut(EMBED_POSITIONS).unwrap().data_mut().fill(0.5);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = embed(&mut tape, &cfg, &b, &[0], 1, 1).unwrap();
        assert!(tape.value(x).data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }
}
