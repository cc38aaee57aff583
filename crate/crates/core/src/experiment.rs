//! Experiment configs and the artifact-writing drivers behind each CLI
//! command.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    full_profile, grad_norm_profile, logit_lens_match, perturb_norm_scales, profile_to_csv, verify_layer_jacobians,
    GradNormProfile, JacobianReport, LensReport, ProfileRow,
};
use crate::blocks::{init_params, UNEMBED};
use crate::config::{ModelConfig, TopologyKind};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::parallel::{map, with_jobs, Execution};
use crate::tensor::{Tape, Tensor};
use crate::topology::{forward_on_tape, TokenBatch};
use crate::training::{metrics_to_csv, prepare_dataset, train, Example, RunOutcome, RunStatus, TrainConfig};

pub const COMPARISON_HEADER: &str = "topology,lr,status,final_loss,eval_acc";
pub const LOSSES_HEADER: &str = "step,loss";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Replaces both the model and data seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// `git describe` of the working directory, or `"unknown"`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub status: String,
    pub status_detail: RunStatus,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_acc: Option<f64>,
    pub git_describe: String,
    pub created_unix: u64,
    pub version: String,
}

/// Saves `params` plus a manifest describing the run into `dir`.
pub fn write_checkpoint(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.params.save(dir.join(PARAMS_FILE))?;
    let manifest = RunManifest {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        status: outcome.status.to_string(),
        status_detail: outcome.status.clone(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        final_eval_loss: outcome.final_eval_loss,
        final_eval_acc: outcome.final_eval_acc,
        git_describe: git_describe(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Per-step training losses, steps counted from 1.
pub fn losses_to_csv(losses: &[f64]) -> String {
    let mut out = String::from(LOSSES_HEADER);
    out.push('\n');
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

/// Trains and writes `metrics.csv`, `losses.csv`, one profile CSV per record under
/// `profiles/`, and the checkpoint into `out`.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let outcome = train(&cfg.model, &cfg.train)?;
    fs::create_dir_all(out.join("profiles"))?;
    fs::write(out.join("metrics.csv"), metrics_to_csv(&outcome.metrics))?;
    fs::write(out.join("losses.csv"), losses_to_csv(&outcome.losses))?;
    for m in &outcome.metrics {
        fs::write(out.join("profiles").join(format!("step_{:06}.csv", m.step)), profile_to_csv(&m.profile))?;
    }
    write_checkpoint(out, cfg, &outcome)?;
    Ok(outcome)
}

/// One model variant of a grid: a topology plus its optional mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridVariant {
    pub topology: TopologyKind,
    #[serde(default)]
    pub fused_input_norm: bool,
    #[serde(default)]
    pub depth_scaling: bool,
    #[serde(default)]
    pub embed_norm: bool,
    #[serde(default)]
    pub qk_norm: bool,
}

/// A sweep over variants × peak learning rates × seeds around one base
/// experiment. Expansion order is variant-major, then lr, then seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub variants: Vec<GridVariant>,
    pub peak_lrs: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl GridConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let grid: GridConfig = serde_json::from_str(&fs::read_to_string(path.as_ref())?)?;
        grid.expand()?;
        Ok(grid)
    }

    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        if self.variants.is_empty() || self.peak_lrs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one variant, lr and seed".into()));
        }
        let mut out = Vec::new();
        for v in &self.variants {
            for &lr in &self.peak_lrs {
                for &seed in &self.seeds {
                    let mut cfg = self.base.clone().with_seed(seed);
                    cfg.model.topology = v.topology;
                    cfg.model.fused_input_norm = v.fused_input_norm;
                    cfg.model.depth_scaling = v.depth_scaling;
                    cfg.model.embed_norm = v.embed_norm;
                    cfg.model.qk_norm = v.qk_norm;
                    cfg.train.peak_lr = lr;
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

/// Reads either a single experiment or a grid from `path`.
pub fn load_experiments(path: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let text = fs::read_to_string(path.as_ref())?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("variants").is_some() {
        serde_json::from_value::<GridConfig>(value)?.expand()
    } else {
        Ok(vec![ExperimentConfig::from_json(&text)?])
    }
}

/// Topology name followed by the optional mechanisms that are switched on.
pub fn variant_label(model: &ModelConfig) -> String {
    let mut label = model.topology.name().to_string();
    for (on, tag) in [
        (model.embed_norm, "+embed_norm"),
        (model.qk_norm, "+qk_norm"),
        (model.fused_input_norm, "+fuse"),
        (model.depth_scaling, "+depth"),
    ] {
        if on {
            label.push_str(tag);
        }
    }
    label
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub topology: String,
    pub lr: f64,
    pub status: String,
    pub final_loss: f64,
    pub eval_acc: Option<f64>,
}

impl ComparisonRow {
    pub fn new(cfg: &ExperimentConfig, outcome: &RunOutcome) -> Self {
        ComparisonRow {
            topology: variant_label(&cfg.model),
            lr: cfg.train.peak_lr,
            status: outcome.status.to_string(),
            final_loss: outcome.final_loss,
            eval_acc: outcome.final_eval_acc,
        }
    }
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.topology,
            r.lr,
            r.status,
            r.final_loss,
            r.eval_acc.map(|a| a.to_string()).unwrap_or_default()
        ));
    }
    out
}

/// Runs every config (up to `jobs` at once), each into `out/run_<k>`, then
/// writes `out/comparison.csv`. Outcomes follow the input order.
pub fn run_all(configs: &[ExperimentConfig], out: &Path, jobs: usize) -> Result<Vec<RunOutcome>> {
    if configs.is_empty() {
        return Err(Error::Config("nothing to compare".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let width = configs.len().to_string().len();
    let items: Vec<(usize, ExperimentConfig)> = configs.iter().cloned().enumerate().collect();
    let results = with_jobs(jobs, || {
        map(Execution::default(), items, |(k, cfg)| run_training(&cfg, &out.join(format!("run_{k:0width$}"))))
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<ComparisonRow> = configs.iter().zip(&outcomes).map(|(c, o)| ComparisonRow::new(c, o)).collect();
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.csv"), comparison_to_csv(&rows))?;
    Ok(outcomes)
}

pub fn run_comparison(configs: &[ExperimentConfig], out: &Path, jobs: usize) -> Result<Vec<ComparisonRow>> {
    let outcomes = run_all(configs, out, jobs)?;
    Ok(configs.iter().zip(&outcomes).map(|(c, o)| ComparisonRow::new(c, o)).collect())
}

/// Jacobian verification for a config at one token, with norm scales moved
/// off their all-ones init. Writes `out/jacobian.json`.
pub fn run_jacobian(cfg: &ExperimentConfig, out: &Path, h: f64) -> Result<JacobianReport> {
    cfg.validate()?;
    let model = &cfg.model;
    let mut params = init_params(model)?;
    perturb_norm_scales(&mut params, model.seed, 0.5);
    let token = (model.seed as usize * 7 + 3) % model.vocab_size;
    let checks = verify_layer_jacobians(Execution::default(), model, &params, token, h)?;
    let report = JacobianReport::new(model, &checks);
    fs::create_dir_all(out)?;
    fs::write(out.join("jacobian.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Loads `params.bin` from a checkpoint directory or file, or builds a fresh
/// init when no checkpoint is given.
pub fn load_params(model: &ModelConfig, checkpoint: Option<&Path>) -> Result<ParamSet> {
    let Some(path) = checkpoint else {
        return init_params(model);
    };
    let file: PathBuf = if path.is_dir() { path.join(PARAMS_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", file.display())));
    }
    let params = ParamSet::load(&file)?;
    let fresh = init_params(model)?;
    let same_layout = fresh.len() == params.len()
        && fresh
            .iter()
            .zip(params.iter())
            .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if !same_layout {
        return Err(Error::Config(format!("checkpoint {} does not match the model config", file.display())));
    }
    Ok(params)
}

/// The fixed batch used by `profile`: the first eval examples.
fn fixed_batch(examples: &[Example], n: usize) -> Result<(TokenBatch, Vec<Option<usize>>)> {
    let chosen = &examples[..n.min(examples.len())];
    if chosen.is_empty() {
        return Err(Error::Config("eval split is empty".into()));
    }
    let seq = chosen[0].tokens.len();
    let tokens = chosen.iter().flat_map(|e| e.tokens.iter().copied()).collect();
    let targets = chosen.iter().flat_map(|e| e.targets.iter().copied()).collect();
    Ok((TokenBatch::new(chosen.len(), seq, tokens)?, targets))
}

#[derive(Debug, Clone)]
pub struct ProfileOutput {
    pub rows: Vec<ProfileRow>,
    pub grads: GradNormProfile,
    pub loss: f64,
}

/// One forward/backward pass on a fixed eval batch; writes `profile.csv`
/// and `grad_norms.json` into `out`.
pub fn run_profile(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<ProfileOutput> {
    cfg.validate()?;
    let model = &cfg.model;
    let mut params = load_params(model, checkpoint)?;
    let data = prepare_dataset(model, &cfg.train)?;
    let (tokens, targets) = fixed_batch(&data.eval, cfg.train.batch_size)?;
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, model, &params, &tokens)?;
    let loss = tape.cross_entropy(fwd.logits, &targets)?;
    let grads = tape.backward(loss)?;
    params.zero_grads();
    params.accumulate_grads(&fwd.bindings, &grads)?;
    let g = grad_norm_profile(model, &params);
    let rows = full_profile(model, &params, &fwd.trace(&tape), Some(&g))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("profile.csv"), profile_to_csv(&rows))?;
    fs::write(out.join("grad_norms.json"), serde_json::to_string_pretty(&g)?)?;
    Ok(ProfileOutput {
        rows,
        grads: g,
        loss: tape.value(loss).item()?,
    })
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data)
}

/// Logit lens over the scored positions of the eval split.
pub fn run_lens(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<LensReport> {
    cfg.validate()?;
    let model = &cfg.model;
    if !model.topology.is_two_stream() {
        return Err(Error::Config(format!("{} has a single stream; the lens needs two", model.topology)));
    }
    let params = load_params(model, checkpoint)?;
    let data = prepare_dataset(model, &cfg.train)?;
    let (mut xs, mut ys, mut ls) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in data.eval.chunks(cfg.train.batch_size.max(1)) {
        let (tokens, targets) = fixed_batch(chunk, chunk.len())?;
        let mut tape = Tape::new();
        let fwd = forward_on_tape(&mut tape, model, &params, &tokens)?;
        let last = fwd.states.last().expect("terminal state");
        let scored: Vec<usize> = (0..targets.len()).filter(|&r| targets[r].is_some()).collect();
        xs.push(select_rows(tape.value(last.x), &scored)?);
        ys.push(select_rows(tape.value(last.y.expect("two-stream")), &scored)?);
        ls.push(select_rows(tape.value(fwd.logits), &scored)?);
    }
    let stack = |parts: Vec<Tensor>| -> Result<Tensor> {
        let d = parts[0].last_dim();
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![data.len() / d, d], data)
    };
    logit_lens_match(&stack(xs)?, &stack(ys)?, &stack(ls)?, params.value(UNEMBED)?)
}
