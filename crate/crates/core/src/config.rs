use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual / normalisation wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    PreNorm,
    PostNorm,
    DeepNorm,
    #[serde(rename = "residual")]
    ResiDual,
    HybridNorm,
    SiameseCanonical,
    SiamesePractical,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 7] = [
        TopologyKind::PreNorm,
        TopologyKind::PostNorm,
        TopologyKind::DeepNorm,
        TopologyKind::ResiDual,
        TopologyKind::HybridNorm,
        TopologyKind::SiameseCanonical,
        TopologyKind::SiamesePractical,
    ];

    /// Carries a second (unbounded) stream `Y` next to `X`.
    pub fn is_two_stream(self) -> bool {
        matches!(
            self,
            TopologyKind::ResiDual | TopologyKind::SiameseCanonical | TopologyKind::SiamesePractical
        )
    }

    pub fn is_siamese(self) -> bool {
        matches!(self, TopologyKind::SiameseCanonical | TopologyKind::SiamesePractical)
    }

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::PreNorm => "pre_norm",
            TopologyKind::PostNorm => "post_norm",
            TopologyKind::DeepNorm => "deep_norm",
            TopologyKind::ResiDual => "residual",
            TopologyKind::HybridNorm => "hybrid_norm",
            TopologyKind::SiameseCanonical => "siamese_canonical",
            TopologyKind::SiamesePractical => "siamese_practical",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TopologyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown topology {s:?}")))
    }
}

fn default_ffn_mult() -> usize {
    4
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Full model description. Each of the `n_layers` layers holds an attention
/// sub-layer followed by an MLP sub-layer, so there are `2 * n_layers`
/// residual sub-layers indexed `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub topology: TopologyKind,
    #[serde(default)]
    pub embed_norm: bool,
    #[serde(default)]
    pub fused_input_norm: bool,
    #[serde(default)]
    pub depth_scaling: bool,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Small config handy for tests and gradient checks.
    pub fn tiny(topology: TopologyKind) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: 11,
            seq_len: 4,
            topology,
            embed_norm: false,
            fused_input_norm: false,
            depth_scaling: false,
            qk_norm: false,
            norm_eps: default_norm_eps(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return fail("d_model must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("n_heads ({}) must divide d_model ({})", self.n_heads, self.d_model));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be >= 1".into());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return fail(format!("norm_eps must be finite and >= 0, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn n_sublayers(&self) -> usize {
        2 * self.n_layers
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// DeepNorm residual weight `(2 L)^{1/4}`.
    pub fn deepnorm_alpha(&self) -> f64 {
        (2.0 * self.n_layers.max(1) as f64).powf(0.25)
    }

    /// DeepNorm init gain `(8 L)^{-1/4}`.
    pub fn deepnorm_beta(&self) -> f64 {
        (8.0 * self.n_layers.max(1) as f64).powf(-0.25)
    }

    /// Factor on the residual update entering the bounded stream at
    /// sub-layer `i`: `1/sqrt(i+1)` with depth scaling, else 1.
    pub fn depth_scale(&self, i: usize) -> f64 {
        if self.depth_scaling && self.topology.is_siamese() {
            1.0 / ((i + 1) as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Sub-layers alternate attention, MLP, attention, ...
pub fn is_attention_sublayer(i: usize) -> bool {
    i % 2 == 0
}
