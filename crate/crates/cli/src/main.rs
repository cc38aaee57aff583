use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use normlab::analysis::{gradcheck_suite, GradcheckDims};
use normlab::experiment::{
    load_experiments, run_comparison, run_jacobian, run_lens, run_profile, run_training, ExperimentConfig,
};
use normlab::parallel::{with_jobs, Execution};
use normlab::tensor::set_fault_injection;

const GRADCHECK_TOL: f64 = 1e-5;
const JACOBIAN_TOL: f64 = 1e-6;
const JACOBIAN_STEP: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "normlab", version, about = "Residual-stream normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the model and data seeds.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        load_config(&self.config, self.seed_override, self.out.as_deref())
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, profiles and a checkpoint.
    Train(Common),
    /// Train several configs and tabulate their outcomes.
    Compare {
        /// Experiment configs or grids; every expanded config is one run.
        #[arg(long = "config", num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Maximum concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of full-model gradients for every topology.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        /// Defaults to min(2, d_model).
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        seq_len: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Compare assembled block Jacobians with finite differences.
    Jacobian(Common),
    /// Magnitude, gradient and contribution profiles on a fixed batch.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory or params file; fresh init when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Logit-lens agreement of each stream on the eval split.
    Lens {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = common.load()?;
            let outcome = run_training(&cfg, &out)?;
            println!(
                "{} status={} final_loss={:.6} eval_acc={}",
                cfg.model.topology,
                outcome.status,
                outcome.final_loss,
                outcome.final_eval_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
            );
            Ok(outcome.status.exit_code() as u8)
        }
        Command::Compare {
            configs,
            out,
            seed_override,
            jobs,
        } => {
            if configs.is_empty() {
                bail!("compare needs at least one --config");
            }
            let mut cfgs = Vec::new();
            for p in &configs {
                let loaded = load_experiments(p).with_context(|| format!("loading {}", p.display()))?;
                cfgs.extend(loaded.into_iter().map(|c| match seed_override {
                    Some(s) => c.with_seed(s),
                    None => c,
                }));
            }
            let rows = run_comparison(&cfgs, &out, jobs.max(1))?;
            for r in &rows {
                println!("{} lr={} status={} final_loss={:.6}", r.topology, r.lr, r.status, r.final_loss);
            }
            println!("wrote {}", out.join("comparison.csv").display());
            Ok(0)
        }
        Command::Gradcheck {
            d_model,
            n_heads,
            n_layers,
            seq_len,
            batch,
            seeds,
            jobs,
            corrupt_grad,
        } => {
            let dims = GradcheckDims {
                d_model,
                n_heads: n_heads.unwrap_or(d_model.clamp(1, 2)),
                n_layers,
                seq_len,
                batch,
                seeds: (0..seeds).collect(),
                ..GradcheckDims::default()
            };
            if corrupt_grad {
                set_fault_injection(true);
            }
            let results = with_jobs(jobs, || gradcheck_suite(Execution::default(), &dims));
            let mut worst: Vec<(String, f64, String)> = Vec::new();
            for r in results {
                let r = r?;
                match worst.iter_mut().find(|w| w.0 == r.label) {
                    Some(w) if r.max_rel_error > w.1 => *w = (r.label, r.max_rel_error, r.worst_parameter),
                    Some(_) => {}
                    None => worst.push((r.label, r.max_rel_error, r.worst_parameter)),
                }
            }
            let mut ok = true;
            for (label, err, at) in &worst {
                let pass = *err <= GRADCHECK_TOL;
                ok &= pass;
                println!("{label:<32} max_rel_error={err:.3e} at {at} {}", if pass { "ok" } else { "FAIL" });
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Jacobian(common) => {
            let (cfg, out) = common.load()?;
            let report = run_jacobian(&cfg, &out, JACOBIAN_STEP)?;
            for l in &report.layers {
                println!("sublayer {:>3} max_abs_diff={:.3e}", l.layer_index, l.max_abs_diff);
            }
            let gap = report.max_abs_diff();
            println!("max_abs_diff={gap:.3e} tolerance={JACOBIAN_TOL:e}");
            Ok(if gap <= JACOBIAN_TOL { 0 } else { 1 })
        }
        Command::Profile { common, checkpoint } => {
            let (cfg, out) = common.load()?;
            let p = run_profile(&cfg, checkpoint.as_deref(), &out)?;
            println!("loss={:.6} global_grad_norm={:.6e}", p.loss, p.grads.global);
            println!("wrote {}", out.join("profile.csv").display());
            Ok(0)
        }
        Command::Lens { common, checkpoint } => {
            let (cfg, _) = common.load()?;
            let report = run_lens(&cfg, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e.downcast_ref::<normlab::Error>().is_some_and(normlab::Error::is_divergence);
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}
