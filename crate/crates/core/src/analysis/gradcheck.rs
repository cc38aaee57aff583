//! Whole-model gradient checks against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::init_params;
use crate::config::{ModelConfig, TopologyKind};
use crate::error::Result;
use crate::params::ParamSet;
use crate::parallel::{map, Execution};
use crate::tensor::{finite_diff_check_with, Tape};
use crate::topology::{forward_on_tape, TokenBatch};

/// Sizes of the models used by the suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub vocab_size: usize,
    pub seeds: Vec<u64>,
    pub h: f64,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        GradcheckDims {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            seq_len: 4,
            batch: 2,
            vocab_size: 11,
            seeds: (0..5).collect(),
            h: 1e-6,
        }
    }
}

impl GradcheckDims {
    pub fn config(&self, kind: TopologyKind, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_mult: 4,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            topology: kind,
            embed_norm: false,
            fused_input_norm: false,
            depth_scaling: false,
            qk_norm: false,
            norm_eps: 1e-5,
            seed,
        }
    }

    /// Every topology at default flags, plus the Siamese kinds with both
    /// mechanisms on and Pre-Norm with the embedding norm and QK-norm.
    pub fn variants(&self) -> Vec<(String, ModelConfig)> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for kind in TopologyKind::ALL {
                out.push((kind.name().to_string(), self.config(kind, seed)));
            }
            for kind in [TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
                let mut c = self.config(kind, seed);
                c.fused_input_norm = true;
                c.depth_scaling = true;
                out.push((format!("{}+fuse+depth", kind.name()), c));
            }
            let mut c = self.config(TopologyKind::PreNorm, seed);
            c.embed_norm = true;
            c.qk_norm = self.d_model / self.n_heads >= 2;
            out.push(("pre_norm+embed_norm+qk_norm".to_string(), c));
        }
        out
    }
}

/// Fixed inputs for a gradient check: random tokens and next-token-style
/// targets, one position per sequence left unscored.
pub fn probe_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> (TokenBatch, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let n = batch * cfg.seq_len;
    let tokens = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let targets = (0..n)
        .map(|r| (r % cfg.seq_len != 0).then(|| rng.gen_range(0..cfg.vocab_size)))
        .collect();
    (TokenBatch::new(batch, cfg.seq_len, tokens).expect("sized batch"), targets)
}

/// Cross-entropy of the model on `batch` and its gradient with respect to
/// every parameter value, flattened in set order.
pub fn loss_and_grad(cfg: &ModelConfig, params: &ParamSet, batch: &TokenBatch, targets: &[Option<usize>]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, cfg, params, batch)?;
    let loss = tape.cross_entropy(fwd.logits, targets)?;
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.num_values());
    for (p, id) in params.iter().zip(fwd.bindings.ids()) {
        flat.extend_from_slice(grads.get_or_zeros(*id, p.value.shape()).data());
    }
    Ok((tape.value(loss).item()?, flat))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub label: String,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
}

fn owner(params: &ParamSet, mut index: usize) -> String {
    for p in params.iter() {
        if index < p.value.numel() {
            return format!("{}[{index}]", p.name);
        }
        index -= p.value.numel();
    }
    String::new()
}

/// Finite-difference check of the full model gradient for one config.
pub fn gradcheck_model(exec: Execution, label: &str, cfg: &ModelConfig, batch: usize, h: f64) -> Result<GradcheckResult> {
    let params = init_params(cfg)?;
    let (tokens, targets) = probe_batch(cfg, batch, cfg.seed);
    let base = params.flat_values();
    let f = |p: &[f64]| {
        let mut q = params.clone();
        q.set_flat_values(p)?;
        loss_and_grad(cfg, &q, &tokens, &targets)
    };
    let report = finite_diff_check_with(exec, f, &base, h)?;
    Ok(GradcheckResult {
        label: label.to_string(),
        seed: cfg.seed,
        coordinates: report.coordinates,
        max_rel_error: report.max_rel_error,
        worst_parameter: owner(&params, report.worst_index),
    })
}

/// Runs every variant of `dims`, in parallel across variants when `exec`
/// allows. Results come back in variant order.
pub fn gradcheck_suite(exec: Execution, dims: &GradcheckDims) -> Vec<Result<GradcheckResult>> {
    map(exec, dims.variants(), |(label, cfg)| gradcheck_model(Execution::Sequential, &label, &cfg, dims.batch, dims.h))
}
