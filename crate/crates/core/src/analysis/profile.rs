//! Depth profiles: hidden-state magnitudes, per-sub-layer gradient norms and
//! stream contribution ratios, plus their CSV form.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::{gamma_name, norm_name, sublayer_prefix, EMBED_POSITIONS, EMBED_TOKENS, FINAL_NORM, UNEMBED};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::topology::StreamState;

pub const PROFILE_HEADER: &str = "layer,magnitude_x,magnitude_y,grad_norm,ratio_x,ratio_y";

/// One depth position. Row `i < N` describes the input of sub-layer `i`;
/// row `N` the final stream state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub layer_index: usize,
    pub magnitude_x: f64,
    pub magnitude_y: Option<f64>,
    pub grad_norm: Option<f64>,
    pub ratio_x: Option<f64>,
    pub ratio_y: Option<f64>,
}

/// Mean ℓ₂ norm of the rows of `t` (one row per token position).
pub fn mean_row_norm(t: &Tensor) -> f64 {
    let rows = t.rows().max(1);
    let d = t.last_dim().max(1);
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64
}

pub fn magnitude_profile(trace: &[StreamState]) -> Result<Vec<ProfileRow>> {
    if trace.is_empty() {
        return Err(Error::Contract("empty trace".into()));
    }
    Ok(trace
        .iter()
        .map(|s| ProfileRow {
            layer_index: s.layer_index,
            magnitude_x: mean_row_norm(&s.x),
            magnitude_y: s.y.as_ref().map(mean_row_norm),
            grad_norm: None,
            ratio_x: None,
            ratio_y: None,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradNormProfile {
    /// Norm of every parameter owned by sub-layer `i`.
    pub per_sublayer: Vec<f64>,
    pub embedding: f64,
    pub unembedding: f64,
    pub final_norm: f64,
    /// Anything else (e.g. the frozen stream input gain).
    pub other: f64,
    pub global: f64,
}

/// Gradient norms grouped by owner, read from `params`' accumulated grads.
pub fn grad_norm_profile(cfg: &ModelConfig, params: &ParamSet) -> GradNormProfile {
    let n = cfg.n_sublayers();
    let prefixes: Vec<String> = (0..n).map(|i| format!("{}.", sublayer_prefix(i))).collect();
    let mut per = vec![0.0; n];
    let (mut embedding, mut unembedding, mut final_norm, mut other) = (0.0, 0.0, 0.0, 0.0);
    for p in params.iter() {
        let sq = p.grad.sum_squares();
        if let Some(i) = prefixes.iter().position(|pre| p.name.starts_with(pre.as_str())) {
            per[i] += sq;
        } else if p.name == EMBED_TOKENS || p.name == EMBED_POSITIONS {
            embedding += sq;
        } else if p.name == UNEMBED {
            unembedding += sq;
        } else if p.name == FINAL_NORM {
            final_norm += sq;
        } else {
            other += sq;
        }
    }
    let global = per.iter().sum::<f64>() + embedding + unembedding + final_norm + other;
    GradNormProfile {
        per_sublayer: per.into_iter().map(f64::sqrt).collect(),
        embedding: embedding.sqrt(),
        unembedding: unembedding.sqrt(),
        final_norm: final_norm.sqrt(),
        other: other.sqrt(),
        global: global.sqrt(),
    }
}

/// `(m_x, m_y) / (m_x + m_y)`, with `(0.5, 0.5)` when both are zero.
pub fn contribution_ratio(m_x: f64, m_y: f64) -> (f64, f64) {
    let total = m_x + m_y;
    if total == 0.0 {
        (0.5, 0.5)
    } else {
        let rx = m_x / total;
        (rx, 1.0 - rx)
    }
}

fn mean_abs(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel().max(1) as f64
}

/// Relative weight each stream carries into every sub-layer's fused input.
/// The unbounded stream's weight is the mean absolute entry of its norm
/// scale; the bounded stream's is γ where present, otherwise the scale of
/// the norm that produced it (the input gain at sub-layer 0).
pub fn stream_contribution_ratios(cfg: &ModelConfig, params: &ParamSet) -> Result<Vec<(f64, f64)>> {
    if !cfg.topology.is_siamese() {
        return Err(Error::Contract(format!("{} has no two-stream fused input", cfg.topology)));
    }
    (0..cfg.n_sublayers())
        .map(|i| {
            let m_y = mean_abs(params.value(&norm_name(i, "ln_y"))?);
            let m_x = if let Some(g) = params.get(&gamma_name(i)) {
                mean_abs(&g.value)
            } else if i == 0 {
                mean_abs(params.value(crate::blocks::STREAM_X_INPUT)?)
            } else {
                // Sub-layer i-1 owns the norm whose output is X_i; in the
                // practical form MLP sub-layers have none, so walk back.
                let mut j = i - 1;
                loop {
                    if let Some(p) = params.get(&norm_name(j, "ln_x")) {
                        break mean_abs(&p.value);
                    }
                    if j == 0 {
                        break mean_abs(params.value(crate::blocks::STREAM_X_INPUT)?);
                    }
                    j -= 1;
                }
            };
            Ok(contribution_ratio(m_x, m_y))
        })
        .collect()
}

/// Merges magnitudes, gradient norms and (for Siamese kinds) ratios into
/// `N + 1` rows.
pub fn full_profile(cfg: &ModelConfig, params: &ParamSet, trace: &[StreamState], grads: Option<&GradNormProfile>) -> Result<Vec<ProfileRow>> {
    let mut rows = magnitude_profile(trace)?;
    let ratios = if cfg.topology.is_siamese() {
        Some(stream_contribution_ratios(cfg, params)?)
    } else {
        None
    };
    for row in &mut rows {
        let i = row.layer_index;
        if let Some(g) = grads {
            row.grad_norm = g.per_sublayer.get(i).copied();
        }
        if let Some((rx, ry)) = ratios.as_ref().and_then(|r| r.get(i)) {
            row.ratio_x = Some(*rx);
            row.ratio_y = Some(*ry);
        }
    }
    Ok(rows)
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn profile_to_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from(PROFILE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.layer_index,
            r.magnitude_x,
            field(r.magnitude_y),
            field(r.grad_norm),
            field(r.ratio_x),
            field(r.ratio_y)
        );
    }
    out
}

pub fn parse_profile_csv(text: &str) -> Result<Vec<ProfileRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(PROFILE_HEADER) {
        return Err(Error::Format("profile CSV header mismatch".into()));
    }
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("line {line}: bad number {s:?}")))
    };
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s, line).map(Some)
        }
    };
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(k, l)| {
            let line = k + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("line {line}: expected 6 fields, got {}", f.len())));
            }
            Ok(ProfileRow {
                layer_index: f[0].parse().map_err(|_| Error::Format(format!("line {line}: bad layer index")))?,
                magnitude_x: num(f[1], line)?,
                magnitude_y: opt(f[2], line)?,
                grad_norm: opt(f[3], line)?,
                ratio_x: opt(f[4], line)?,
                ratio_y: opt(f[5], line)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::init_params;
    use crate::config::TopologyKind;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        let (x, y) = contribution_ratio(1.05, 0.42);
        assert!((x - 0.714_285_714).abs() < 1e-6 && (y - 0.285_714_286).abs() < 1e-6);
        assert_eq!(contribution_ratio(1.0, 1.0), (0.5, 0.5));
        assert_eq!(contribution_ratio(0.3, 0.0), (1.0, 0.0));
        assert_eq!(contribution_ratio(0.0, 0.0), (0.5, 0.5));
    }

    #[test]
    fn ratios_at_init_are_even() {
        for kind in [TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
            let cfg = ModelConfig::tiny(kind);
            let r = stream_contribution_ratios(&cfg, &init_params(&cfg).unwrap()).unwrap();
            assert!(r.iter().all(|&p| p == (0.5, 0.5)));
        }
        let cfg = ModelConfig::tiny(TopologyKind::PreNorm);
        assert!(stream_contribution_ratios(&cfg, &init_params(&cfg).unwrap()).is_err());
    }

    #[test]
    fn zero_grads_give_zero_norms() {
        let cfg = ModelConfig::tiny(TopologyKind::HybridNorm);
        let g = grad_norm_profile(&cfg, &init_params(&cfg).unwrap());
        assert_eq!(g.global, 0.0);
        assert!(g.per_sublayer.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_rejects_bad_input() {
        assert!(parse_profile_csv("nope\n").is_err());
        assert!(parse_profile_csv(&format!("{PROFILE_HEADER}\n1,2,3\n")).is_err());
    }

    fn opt_f64() -> impl Strategy<Value = Option<f64>> {
        proptest::option::of(-1e6f64..1e6)
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in proptest::collection::vec((0usize..100, 0f64..1e6, opt_f64(), opt_f64(), opt_f64(), opt_f64()), 0..20)) {
            let rows: Vec<ProfileRow> = rows.into_iter().map(|(l, x, y, g, rx, ry)| ProfileRow {
                layer_index: l, magnitude_x: x, magnitude_y: y, grad_norm: g, ratio_x: rx, ratio_y: ry,
            }).collect();
            prop_assert_eq!(parse_profile_csv(&profile_to_csv(&rows)).unwrap(), rows);
        }
    }
}
