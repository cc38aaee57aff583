//! The training loop and its stability bookkeeping.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, DatasetConfig, Example};
use super::optim::{clip_global_norm, cosine_lr, AdamW, AdamWHyper};
use crate::analysis::{full_profile, grad_norm_profile, ProfileRow};
use crate::blocks::init_params;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tape;
use crate::topology::{forward_on_tape, TokenBatch};

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm,clip_factor,eval_acc";

fn d_final_lr_factor() -> f64 {
    0.1
}
fn d_batch_size() -> usize {
    64
}
fn d_weight_decay() -> f64 {
    0.1
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_clip_norm() -> f64 {
    1.0
}
fn d_spike_factor() -> f64 {
    2.0
}
fn d_spike_min_delta() -> f64 {
    0.25
}
fn d_spike_window() -> usize {
    100
}
fn d_divergence_factor() -> f64 {
    10.0
}
fn d_divergence_patience() -> usize {
    10
}
fn d_eval_every() -> usize {
    50
}
fn d_final_window() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "d_final_lr_factor")]
    pub final_lr_factor: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Exempt norm scales, γ and embeddings from weight decay.
    #[serde(default)]
    pub exempt_norms_from_decay: bool,
    #[serde(default = "d_betas")]
    pub betas: (f64, f64),
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_clip_norm")]
    pub clip_norm: f64,
    /// A step is a spike when its loss exceeds this multiple of the trailing median...
    #[serde(default = "d_spike_factor")]
    pub spike_factor: f64,
    /// ...and the median by at least this much.
    #[serde(default = "d_spike_min_delta")]
    pub spike_min_delta: f64,
    #[serde(default = "d_spike_window")]
    pub spike_window: usize,
    /// Loss above this multiple of the first loss for `divergence_patience`
    /// consecutive records counts as divergence.
    #[serde(default = "d_divergence_factor")]
    pub divergence_factor: f64,
    #[serde(default = "d_divergence_patience")]
    pub divergence_patience: usize,
    /// When set, a run whose final loss stays above this fraction of the
    /// best constant predictor's loss has failed to converge and is reported
    /// as diverged at its last step.
    #[serde(default)]
    pub stall_fraction: Option<f64>,
    pub dataset: DatasetConfig,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    /// Trailing steps averaged into the reported final loss.
    #[serde(default = "d_final_window")]
    pub final_window: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return fail(format!(
                "need 0 <= warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return fail(format!("peak_lr must be finite and >= 0, got {}", self.peak_lr));
        }
        if !(self.spike_factor > 1.0) {
            return fail(format!("spike_factor must exceed 1, got {}", self.spike_factor));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.spike_window == 0 || self.final_window == 0 {
            return fail("batch_size, eval_every, spike_window and final_window must be >= 1".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.clip_norm > 0.0 && self.adam_eps > 0.0) {
            return fail("clip_norm and adam_eps must be positive".into());
        }
        if let Some(f) = self.stall_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return fail(format!("stall_fraction must lie in (0, 1], got {f}"));
            }
        }
        if !(0.0..=1.0).contains(&self.final_lr_factor) {
            return fail(format!("final_lr_factor must lie in [0, 1], got {}", self.final_lr_factor));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(step, self.peak_lr, self.warmup_steps, self.total_steps, self.final_lr_factor)
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            exempt_norms: self.exempt_norms_from_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Converged,
    Diverged { step: usize },
    SpikeDetected { steps: Vec<usize> },
}

impl RunStatus {
    /// Process exit code for the status.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Converged => 0,
            RunStatus::Diverged { .. } => 2,
            RunStatus::SpikeDetected { .. } => 3,
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Converged => write!(f, "Converged"),
            RunStatus::Diverged { step } => write!(f, "Diverged({step})"),
            RunStatus::SpikeDetected { steps } => {
                let s: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
                write!(f, "SpikeDetected({})", s.join(";"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_factor: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub block_grad_norms: Vec<f64>,
    /// Magnitudes, gradient norms and ratios on the step's batch.
    pub profile: Vec<ProfileRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    /// First step's training loss.
    pub initial_loss: f64,
    /// Mean training loss over the trailing window.
    pub final_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_acc: Option<f64>,
    /// Training loss of every completed step.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricsRecord>,
    pub params: ParamSet,
}

fn batch_of(examples: &[&Example]) -> Result<(TokenBatch, Vec<Option<usize>>)> {
    let seq = examples[0].tokens.len();
    let tokens = examples.iter().flat_map(|e| e.tokens.iter().copied()).collect();
    let targets = examples.iter().flat_map(|e| e.targets.iter().copied()).collect();
    Ok((TokenBatch::new(examples.len(), seq, tokens)?, targets))
}

/// Mean cross-entropy and accuracy over the scored positions of `examples`.
pub fn evaluate(cfg: &ModelConfig, params: &ParamSet, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct, mut scored) = (0.0, 0usize, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (tokens, targets) = batch_of(&refs)?;
        let mut tape = Tape::new();
        let fwd = forward_on_tape(&mut tape, cfg, params, &tokens)?;
        let logits = tape.value(fwd.logits);
        let v = logits.last_dim();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[t];
            let arg = (0..v).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(arg == t);
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Contract("evaluation set has no scored positions".into()));
    }
    Ok((loss_sum / scored as f64, correct as f64 / scored as f64))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Minimum history before the spike rule applies.
const SPIKE_MIN_HISTORY: usize = 20;

/// Tracks loss spikes against a trailing median. Consecutive spiking steps
/// form one episode, reported by its first step.
#[derive(Debug, Clone)]
pub struct SpikeDetector {
    factor: f64,
    min_delta: f64,
    window: usize,
    history: Vec<f64>,
    in_episode: bool,
    pub episodes: Vec<usize>,
}

impl SpikeDetector {
    pub fn new(factor: f64, min_delta: f64, window: usize) -> Self {
        SpikeDetector {
            factor,
            min_delta,
            window,
            history: Vec::new(),
            in_episode: false,
            episodes: Vec::new(),
        }
    }

    /// Feeds one step's loss; returns whether it is a spike.
    pub fn observe(&mut self, step: usize, loss: f64) -> bool {
        let spike = self.history.len() >= SPIKE_MIN_HISTORY.min(self.window) && {
            let start = self.history.len().saturating_sub(self.window);
            let m = median(&self.history[start..]);
            loss > self.factor * m && loss - m > self.min_delta
        };
        if spike && !self.in_episode {
            self.episodes.push(step);
        }
        self.in_episode = spike;
        self.history.push(loss);
        spike
    }
}

struct Progress {
    losses: Vec<f64>,
    metrics: Vec<MetricsRecord>,
}

fn sample_batch<'a>(rng: &mut ChaCha8Rng, data: &'a Dataset, n: usize) -> Vec<&'a Example> {
    (0..n).map(|_| &data.train[rng.gen_range(0..data.train.len())]).collect()
}

/// Cross-entropy of the best input-independent prediction: the entropy of
/// the scored targets in `examples`.
pub fn constant_predictor_loss(examples: &[Example]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for t in examples.iter().flat_map(|e| e.targets.iter().flatten()) {
        *counts.entry(*t).or_insert(0usize) += 1;
        total += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Builds the dataset for a run and checks it fits the model.
pub fn prepare_dataset(model: &ModelConfig, train: &TrainConfig) -> Result<Dataset> {
    let data = train.dataset.build(model.seq_len, train.seed)?;
    if data.min_vocab > model.vocab_size {
        return Err(Error::Config(format!(
            "dataset needs a vocabulary of {} but the model has {}",
            data.min_vocab, model.vocab_size
        )));
    }
    if data.seq_len > model.seq_len {
        return Err(Error::Config(format!(
            "dataset sequences have length {} but the model allows {}",
            data.seq_len, model.seq_len
        )));
    }
    Ok(data)
}

/// Trains from a fresh init. Divergence and spikes end up in the returned
/// status; only invalid configurations are errors.
pub fn train(model: &ModelConfig, cfg: &TrainConfig) -> Result<RunOutcome> {
    model.validate()?;
    cfg.validate()?;
    let data = prepare_dataset(model, cfg)?;
    let mut params = init_params(model)?;
    let mut opt = AdamW::new(&params, cfg.hyper());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
    let mut spikes = SpikeDetector::new(cfg.spike_factor, cfg.spike_min_delta, cfg.spike_window);
    let mut progress = Progress {
        losses: Vec::with_capacity(cfg.total_steps),
        metrics: Vec::new(),
    };
    let mut above_threshold = 0usize;
    let mut diverged_at = None;

    for step in 1..=cfg.total_steps {
        let lr = cfg.lr_at(step);
        let record = step == 1 || step % cfg.eval_every == 0 || step == cfg.total_steps;
        let examples = sample_batch(&mut rng, &data, cfg.batch_size);
        let (tokens, targets) = batch_of(&examples)?;

        let mut tape = Tape::new();
        let fwd = match forward_on_tape(&mut tape, model, &params, &tokens) {
            Ok(f) => f,
            Err(e) if e.is_divergence() => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let loss_node = tape.cross_entropy(fwd.logits, &targets)?;
        let loss = tape.value(loss_node).item()?;
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        let grads = tape.backward(loss_node)?;
        params.zero_grads();
        params.accumulate_grads(&fwd.bindings, &grads)?;
        let grad_norm = params.grad_norm();
        if !grad_norm.is_finite() {
            diverged_at = Some(step);
            break;
        }
        let snapshot = if record {
            let g = grad_norm_profile(model, &params);
            let profile = full_profile(model, &params, &fwd.trace(&tape), Some(&g))?;
            Some((g.per_sublayer, profile))
        } else {
            None
        };
        let clip_factor = clip_global_norm(&mut params, cfg.clip_norm);
        match opt.step(&mut params, lr) {
            Ok(()) => {}
            Err(e) if e.is_divergence() => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
        progress.losses.push(loss);
        spikes.observe(step, loss);

        if let Some((block_grad_norms, profile)) = snapshot {
            let (eval_loss, eval_acc) = match evaluate(model, &params, &data.eval, cfg.batch_size) {
                Ok((l, a)) => (Some(l), Some(a)),
                Err(e) if e.is_divergence() => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            };
            progress.metrics.push(MetricsRecord {
                step,
                loss,
                lr,
                grad_norm,
                clip_factor,
                eval_loss,
                eval_acc,
                block_grad_norms,
                profile,
            });
            let initial = progress.losses[0];
            if loss > cfg.divergence_factor * initial {
                above_threshold += 1;
                if above_threshold >= cfg.divergence_patience {
                    diverged_at = Some(step);
                    break;
                }
            } else {
                above_threshold = 0;
            }
        }
    }

    let initial_loss = progress.losses.first().copied().unwrap_or(f64::NAN);
    let tail = &progress.losses[progress.losses.len().saturating_sub(cfg.final_window)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    if let (None, Some(f)) = (diverged_at, cfg.stall_fraction) {
        if final_loss > f * constant_predictor_loss(&data.train) {
            diverged_at = Some(progress.losses.len());
        }
    }
    let status = match diverged_at {
        Some(step) => RunStatus::Diverged { step },
        None if !spikes.episodes.is_empty() => RunStatus::SpikeDetected {
            steps: spikes.episodes.clone(),
        },
        None => RunStatus::Converged,
    };
    let last_eval = progress.metrics.last().filter(|m| m.step == cfg.total_steps);
    Ok(RunOutcome {
        status,
        initial_loss,
        final_loss,
        final_eval_loss: last_eval.and_then(|m| m.eval_loss),
        final_eval_acc: last_eval.and_then(|m| m.eval_acc),
        losses: progress.losses,
        metrics: progress.metrics,
        params,
    })
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_to_csv(metrics: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.step,
            m.loss,
            m.lr,
            m.grad_norm,
            m.clip_factor,
            opt_field(m.eval_acc)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TopologyKind;

    pub(crate) fn small(kind: TopologyKind) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            vocab_size: 8,
            seq_len: 3,
            ..ModelConfig::tiny(kind)
        };
        let train = TrainConfig {
            peak_lr: 1e-2,
            warmup_steps: 5,
            total_steps: 30,
            final_lr_factor: 0.1,
            batch_size: 8,
            weight_decay: 0.1,
            exempt_norms_from_decay: false,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            clip_norm: 1.0,
            spike_factor: 2.0,
            spike_min_delta: 0.25,
            spike_window: 100,
            divergence_factor: 10.0,
            divergence_patience: 10,
            stall_fraction: None,
            dataset: DatasetConfig::ModularAdd { p: 7, eval_fraction: 0.3 },
            eval_every: 10,
            final_window: 10,
            seed: 0,
        };
        (model, train)
    }

    #[test]
    fn status_strings_and_codes() {
        assert_eq!(RunStatus::Converged.to_string(), "Converged");
        assert_eq!(RunStatus::Diverged { step: 120 }.to_string(), "Diverged(120)");
        let s = RunStatus::SpikeDetected { steps: vec![45, 67] };
        assert_eq!(s.to_string(), "SpikeDetected(45;67)");
        assert_eq!((RunStatus::Converged.exit_code(), s.exit_code()), (0, 3));
    }

    #[test]
    fn deterministic_runs() {
        let (m, t) = small(TopologyKind::SiamesePractical);
        let a = train(&m, &t).unwrap();
        let b = train(&m, &t).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
        assert_eq!(a.params.flat_values(), b.params.flat_values());
    }

    #[test]
    fn zero_lr_leaves_parameters_alone() {
        let (m, mut t) = small(TopologyKind::PreNorm);
        t.peak_lr = 0.0;
        let out = train(&m, &t).unwrap();
        assert_eq!(out.status, RunStatus::Converged);
        assert_eq!(out.params.flat_values(), init_params(&m).unwrap().flat_values());
        let evals: Vec<f64> = out.metrics.iter().filter_map(|r| r.eval_loss).collect();
        assert!(evals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn vocab_must_cover_the_task() {
        let (mut m, t) = small(TopologyKind::PreNorm);
        m.vocab_size = 7;
        assert!(matches!(train(&m, &t), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_train_configs() {
        let (_, t) = small(TopologyKind::PreNorm);
        for bad in [
            TrainConfig { warmup_steps: 30, ..t.clone() },
            TrainConfig { spike_factor: 1.0, ..t.clone() },
            TrainConfig { peak_lr: -1.0, ..t.clone() },
            TrainConfig { stall_fraction: Some(1.5), ..t.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn constant_predictor_baseline() {
        let ex = |t: usize| Example {
            tokens: vec![0, 0],
            targets: vec![None, Some(t)],
        };
        let uniform: Vec<Example> = (0..4).map(ex).collect();
        assert!((constant_predictor_loss(&uniform) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(constant_predictor_loss(&[ex(2), ex(2)]), 0.0);
    }

    #[test]
    fn untrained_runs_stall_only_when_asked() {
        let (m, t) = small(TopologyKind::PreNorm);
        let frozen = TrainConfig { peak_lr: 0.0, ..t.clone() };
        assert_eq!(train(&m, &frozen).unwrap().status, RunStatus::Converged);
        let strict = TrainConfig {
            stall_fraction: Some(0.9),
            ..frozen
        };
        assert_eq!(train(&m, &strict).unwrap().status, RunStatus::Diverged { step: t.total_steps });
    }

    #[test]
    fn spike_detector_rules() {
        let mut d = SpikeDetector::new(2.0, 0.25, 100);
        for s in 1..=30 {
            assert!(!d.observe(s, 1.0));
        }
        assert!(d.observe(31, 3.0));
        assert!(d.observe(32, 3.0));
        assert!(!d.observe(33, 1.0));
        assert!(d.observe(34, 2.5));
        assert_eq!(d.episodes, vec![31, 34]);

        // Small absolute jumps near zero loss are not spikes.
        let mut d = SpikeDetector::new(2.0, 0.25, 100);
        for s in 1..=30 {
            d.observe(s, 0.01);
        }
        assert!(!d.observe(31, 0.1));
    }

    #[test]
    fn records_carry_profiles() {
        let (m, t) = small(TopologyKind::SiameseCanonical);
        let out = train(&m, &t).unwrap();
        let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 10, 20, 30]);
        let r = &out.metrics[1];
        assert_eq!(r.profile.len(), m.n_sublayers() + 1);
        assert!(r.profile[0].ratio_x.is_some());
        assert_eq!(r.block_grad_norms.len(), m.n_sublayers());
        assert!(out.final_eval_acc.is_some());
        let csv = metrics_to_csv(&out.metrics);
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 5);
    }
}
