//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to the real stdout (bypassing the harness capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use normlab::analysis::{
    gradcheck_suite, jacobian_gap_over_seeds, logit_lens_match, magnitude_profile, parse_profile_csv, perturb_norm_scales,
    profile_to_csv, stream_contribution_ratios, verify_layer_jacobians, GradcheckDims,
};
use normlab::blocks::{init_params, norm_name};
use normlab::experiment::{
    comparison_to_csv, load_experiments, losses_to_csv, run_all, run_comparison, run_lens, run_profile, run_training,
    ExperimentConfig, GridConfig,
};
use normlab::parallel::Execution;
use normlab::tensor::{matmul, rms_norm, Tape};
use normlab::topology::{apply_reduction, forward_on_tape, model_forward, Reduction, StreamNodes, TokenBatch};
use normlab::training::{metrics_to_csv, RunStatus};
use normlab::{ModelConfig, ParamSet, Tensor, TopologyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOL: f64 = 1e-5;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const JACOBIAN_TOL: f64 = 1e-6;
const JACOBIAN_STEP: f64 = 1e-6;
const JACOBIAN_BUDGET: Duration = Duration::from_secs(30);
const RESIDUAL_TOL: f64 = 1e-10;
const REDUCTION_TOL: f64 = 1e-12;
const MAGNITUDE_TOL: f64 = 1e-9;
const RATIO_TOL: f64 = 1e-12;
const CHARACTERIZATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const CHARACTERIZATION_LRS: [f64; 3] = [1e-3, 3e-3, 1e-2];

fn report(name: &str, pass: bool, detail: impl std::fmt::Display) {
    let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(pass, "{line}");
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn random_tokens(cfg: &ModelConfig, batch: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let t = (0..batch * cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    TokenBatch::new(batch, cfg.seq_len, t).unwrap()
}

#[test]
fn gradient_correctness() {
    let dims = GradcheckDims::default();
    assert_eq!((dims.d_model, dims.n_layers, dims.seq_len, dims.seeds.len()), (8, 2, 4, 5));
    let start = Instant::now();
    let results: Vec<_> = gradcheck_suite(Execution::default(), &dims).into_iter().map(Result::unwrap).collect();
    let elapsed = start.elapsed();
    let variants = dims.variants();
    let kinds: std::collections::HashSet<TopologyKind> = variants.iter().map(|(_, c)| c.topology).collect();
    let covered = variants.iter().all(|(label, _)| results.iter().filter(|r| &r.label == label).count() == dims.seeds.len());
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    report(
        "gradient_correctness",
        kinds.len() == 7 && covered && worst <= GRADCHECK_TOL && elapsed < GRADCHECK_BUDGET,
        format!("{} checks over {} kinds, worst rel error {worst:.2e} (tol {GRADCHECK_TOL:e}), {elapsed:.1?}", results.len(), kinds.len()),
    );
}

fn jacobian_config(kind: TopologyKind, depth_scaling: bool) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        depth_scaling,
        ..ModelConfig::tiny(kind)
    }
}

#[test]
fn block_jacobian_matches_bruteforce() {
    let seeds: Vec<u64> = (0..10).collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for kind in [TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
        for depth in [false, true] {
            for gap in jacobian_gap_over_seeds(Execution::default(), &jacobian_config(kind, depth), &seeds, JACOBIAN_STEP) {
                worst = worst.max(gap.unwrap());
                count += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "block_jacobian_matches_bruteforce",
        count == 40 && worst <= JACOBIAN_TOL && elapsed < JACOBIAN_BUDGET,
        format!("{count} model/seed cases, worst entry gap {worst:.2e} (tol {JACOBIAN_TOL:e}), {elapsed:.1?}"),
    );
}

#[test]
fn residual_cross_block_vanishes_and_accumulator_is_identity() {
    let mut worst_xy = 0.0f64;
    let mut worst_yy = 0.0f64;
    for seed in 0..10 {
        let cfg = ModelConfig {
            seed,
            ..jacobian_config(TopologyKind::ResiDual, false)
        };
        let mut params = init_params(&cfg).unwrap();
        perturb_norm_scales(&mut params, seed, 0.5);
        let d = cfg.d_model;
        for check in verify_layer_jacobians(Execution::Sequential, &cfg, &params, seed as usize % cfg.vocab_size, JACOBIAN_STEP).unwrap() {
            let j = &check.assembled;
            worst_xy = j.dxy.as_ref().unwrap().data().iter().fold(worst_xy, |m, v| m.max(v.abs()));
            for (k, v) in j.dyy.as_ref().unwrap().data().iter().enumerate() {
                let want = if k / d == k % d { 1.0 } else { 0.0 };
                worst_yy = worst_yy.max((v - want).abs());
            }
        }
    }
    report(
        "residual_cross_block_vanishes_and_accumulator_is_identity",
        worst_xy <= RESIDUAL_TOL && worst_yy <= RESIDUAL_TOL,
        format!("max |dXY| {worst_xy:.2e}, max |dYY - I| {worst_yy:.2e} (tol {RESIDUAL_TOL:e})"),
    );
}

fn reduction_config(kind: TopologyKind, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 4,
        vocab_size: 13,
        seq_len: 5,
        seed,
        ..ModelConfig::tiny(kind)
    }
}

/// Loads `src` into a fresh model of another topology; each sub-layer's
/// single norm takes the scale of `kept_norm`.
fn transplant(src: &ParamSet, target: &ModelConfig, kept_norm: &str) -> ParamSet {
    let mut dst = init_params(target).unwrap();
    for p in dst.iter_mut() {
        let from = match p.name.rsplit_once(".ln.scale") {
            Some((prefix, "")) => format!("{prefix}.{kept_norm}.scale"),
            _ => p.name.clone(),
        };
        p.value = src.value(&from).unwrap().clone();
    }
    dst
}

#[test]
fn reductions_match_independent_models() {
    let mut worst = BTreeMap::new();
    for (reduction, target, kept) in [
        (Reduction::ToPreNorm, TopologyKind::PreNorm, "ln_y"),
        (Reduction::ToPostNorm, TopologyKind::PostNorm, "ln_x"),
    ] {
        for seed in 0..10 {
            let cfg = reduction_config(TopologyKind::SiameseCanonical, seed);
            let mut params = init_params(&cfg).unwrap();
            perturb_norm_scales(&mut params, seed, 0.5);
            let reduced = apply_reduction(&cfg, &params, reduction).unwrap();
            let other = reduction_config(target, seed);
            let other_params = transplant(&params, &other, kept);
            let tokens = random_tokens(&cfg, 2, seed);
            let a = model_forward(&cfg, &reduced, &tokens).unwrap().logits;
            let b = model_forward(&other, &other_params, &tokens).unwrap().logits;
            let e = worst.entry(target.to_string()).or_insert(0.0f64);
            *e = e.max(a.max_abs_diff(&b));
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    report(
        "reductions_match_independent_models",
        max <= REDUCTION_TOL,
        format!("10 seeds, d=16, worst logit gap {worst:?} (tol {REDUCTION_TOL:e})"),
    );
}

fn magnitude_config(kind: TopologyKind, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        vocab_size: 32,
        seq_len: 8,
        norm_eps: 0.0,
        seed,
        ..ModelConfig::tiny(kind)
    }
}

/// Per-depth X-stream magnitudes averaged over eight seeds.
fn mean_x_profile(base: impl Fn(u64) -> ModelConfig) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    for seed in 0..8 {
        let cfg = base(seed);
        let params = init_params(&cfg).unwrap();
        let trace = model_forward(&cfg, &params, &random_tokens(&cfg, 2, seed)).unwrap().trace;
        let rows = magnitude_profile(&trace).unwrap();
        sum.resize(rows.len(), 0.0);
        for (s, r) in sum.iter_mut().zip(&rows) {
            *s += r.magnitude_x / 8.0;
        }
    }
    sum
}

#[test]
fn magnitude_dynamics_at_init() {
    let root_d = 8.0;
    let pre = mean_x_profile(|s| magnitude_config(TopologyKind::PreNorm, s));
    let pre_ok = pre.len() == 17 && pre.windows(2).all(|w| w[1] >= w[0]);

    let gap = |v: f64| (v - root_d).abs();
    let post = mean_x_profile(|s| magnitude_config(TopologyKind::PostNorm, s));
    let post_gap = post[1..].iter().map(|&v| gap(v)).fold(0.0, f64::max);
    let canonical = mean_x_profile(|s| magnitude_config(TopologyKind::SiameseCanonical, s));
    let canonical_gap = canonical[1..].iter().map(|&v| gap(v)).fold(0.0, f64::max);
    // The practical layout normalizes X only after attention sub-layers.
    let practical = mean_x_profile(|s| ModelConfig {
        fused_input_norm: true,
        depth_scaling: true,
        ..magnitude_config(TopologyKind::SiamesePractical, s)
    });
    let practical_gap = practical.iter().skip(1).step_by(2).map(|&v| gap(v)).fold(0.0, f64::max);

    let embed_gap = TopologyKind::ALL
        .iter()
        .map(|&k| {
            let p = mean_x_profile(|s| ModelConfig {
                embed_norm: true,
                ..magnitude_config(k, s)
            });
            gap(p[0])
        })
        .fold(0.0, f64::max);

    let post_ln_gap = post_gap.max(canonical_gap).max(practical_gap);
    report(
        "magnitude_dynamics_at_init",
        pre_ok && post_ln_gap <= MAGNITUDE_TOL && embed_gap <= MAGNITUDE_TOL,
        format!(
            "pre-norm {:.3} -> {:.3} non-decreasing={pre_ok}; post-LN gap to sqrt(64) {post_ln_gap:.1e}; embed_norm layer-0 gap {embed_gap:.1e} (tol {MAGNITUDE_TOL:e})",
            pre[0],
            pre[16]
        ),
    );
}

#[test]
fn identity_gradient_highway() {
    let mut cases = 0;
    let mut failures = Vec::new();
    for kind in [TopologyKind::PreNorm, TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
        for depth in [false, true] {
            let cfg = ModelConfig {
                n_layers: 4,
                depth_scaling: depth && kind.is_siamese(),
                fused_input_norm: kind.is_siamese(),
                ..ModelConfig::tiny(kind)
            };
            let mut params = init_params(&cfg).unwrap();
            for p in params.iter_mut() {
                if p.name.ends_with(".w_o") || p.name.ends_with(".w_down") {
                    p.value.data_mut().fill(0.0);
                }
            }
            let tokens = random_tokens(&cfg, 2, 1);
            let mut tape = Tape::new();
            let fwd = forward_on_tape(&mut tape, &cfg, &params, &tokens).unwrap();
            let targets: Vec<Option<usize>> = (0..tokens.rows()).map(|r| Some((r * 3) % cfg.vocab_size)).collect();
            let loss = tape.cross_entropy(fwd.logits, &targets).unwrap();
            let grads = tape.backward(loss).unwrap();
            let highway = |s: &StreamNodes| s.y.unwrap_or(s.x);
            let top = grads.get(highway(fwd.states.last().unwrap())).unwrap();
            for s in &fwd.states {
                cases += 1;
                if grads.get(highway(s)).unwrap().data() != top.data() || top.l2_norm() == 0.0 {
                    failures.push(format!("{kind} depth={depth} sub-layer {}", s.layer_index));
                }
            }
        }
    }
    report(
        "identity_gradient_highway",
        failures.is_empty(),
        format!("{cases} stream positions bitwise equal to the top adjoint; mismatches {failures:?}"),
    );
}

#[test]
fn depth_scaling_values_and_unscaled_stream() {
    let mut problems = Vec::new();
    for kind in [TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
        for scaled in [true, false] {
            let cfg = ModelConfig {
                depth_scaling: scaled,
                ..reduction_config(kind, 4)
            };
            let params = init_params(&cfg).unwrap();
            let trace = model_forward(&cfg, &params, &random_tokens(&cfg, 2, 0)).unwrap().trace;
            for (i, pair) in trace.windows(2).enumerate() {
                let expected = if scaled { 1.0 / ((i + 1) as f64).sqrt() } else { 1.0 };
                if pair[0].depth_scale != expected {
                    problems.push(format!("{kind} s[{i}]={}", pair[0].depth_scale));
                }
                // Y accumulates raw updates in both settings.
                let mut y_next = pair[0].y.clone().unwrap();
                y_next.add_assign(pair[0].update.as_ref().unwrap()).unwrap();
                if &y_next != pair[1].y.as_ref().unwrap() {
                    problems.push(format!("{kind} scaled={scaled} Y[{}]", i + 1));
                }
                // With the flag off, the canonical X stream is the plain normalized sum.
                if !scaled && kind == TopologyKind::SiameseCanonical {
                    let mut pre = pair[0].x.clone();
                    pre.add_assign(pair[0].update.as_ref().unwrap()).unwrap();
                    let ln = params.value(&norm_name(i, "ln_x")).unwrap();
                    if rms_norm(&pre, Some(ln), cfg.norm_eps).unwrap() != pair[1].x {
                        problems.push(format!("unscaled X[{}]", i + 1));
                    }
                }
            }
            if scaled && (trace[0].depth_scale != 1.0 || trace[3].depth_scale != 0.5) {
                problems.push(format!("{kind} s[0]={} s[3]={}", trace[0].depth_scale, trace[3].depth_scale));
            }
        }
    }
    report(
        "depth_scaling_values_and_unscaled_stream",
        problems.is_empty(),
        format!("s_i = 1/sqrt(i+1), Y stream bit-exact; problems {problems:?}"),
    );
}

#[test]
fn stability_characterization() {
    let path = config_path("characterization.json");
    let grid = GridConfig::load(&path).unwrap();
    assert_eq!(grid.peak_lrs, CHARACTERIZATION_LRS, "characterization grid is pinned");
    let configs = load_experiments(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let outcomes = run_all(&configs, dir.path(), 1).unwrap();
    let elapsed = start.elapsed();
    let top = CHARACTERIZATION_LRS[2];

    let mut table = Vec::new();
    let mut post_unstable = false;
    let mut siamese_ok = 0;
    let mut pre_ok = true;
    for (cfg, out) in configs.iter().zip(&outcomes) {
        let kind = cfg.model.topology;
        let lr = cfg.train.peak_lr;
        table.push(format!("{kind}@{lr}={}", out.status));
        let converged = out.status == RunStatus::Converged;
        match kind {
            TopologyKind::PostNorm if lr == top => post_unstable = !converged,
            TopologyKind::SiameseCanonical | TopologyKind::SiamesePractical if lr == top => {
                siamese_ok += usize::from(converged && out.final_loss < out.initial_loss);
            }
            TopologyKind::PreNorm => pre_ok &= converged,
            _ => {}
        }
    }
    report(
        "stability_characterization",
        post_unstable && siamese_ok == 2 && pre_ok && elapsed < CHARACTERIZATION_BUDGET,
        format!("{} in {elapsed:.0?}", table.join(" ")),
    );
}

#[test]
fn ablation_directionality() {
    let configs = load_experiments(config_path("ablation.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcomes = run_all(&configs, dir.path(), 1).unwrap();
    // seed -> (fuse, depth) -> final eval loss
    let mut by_seed: BTreeMap<u64, BTreeMap<(bool, bool), f64>> = BTreeMap::new();
    for (cfg, out) in configs.iter().zip(&outcomes) {
        assert_eq!(cfg.model.topology, TopologyKind::SiamesePractical);
        by_seed
            .entry(cfg.model.seed)
            .or_default()
            .insert((cfg.model.fused_input_norm, cfg.model.depth_scaling), out.final_eval_loss.unwrap());
    }
    assert_eq!(by_seed.len(), 3);
    let mut wins = 0;
    let mut detail = Vec::new();
    for (seed, losses) in &by_seed {
        let full = losses[&(true, true)];
        let no_fuse = losses[&(false, true)];
        let no_depth = losses[&(true, false)];
        let win = full <= no_fuse && full <= no_depth;
        wins += usize::from(win);
        detail.push(format!("seed {seed}: both {full:.2e} / no-fuse {no_fuse:.2e} / no-depth {no_depth:.2e}"));
    }
    report("ablation_directionality", wins >= 2, format!("{wins}/3 seeds; {}", detail.join("; ")));
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn opt(field: &str) -> Option<f64> {
    (!field.is_empty()).then(|| field.parse().unwrap())
}

#[test]
fn analysis_artifacts() {
    let mut problems = Vec::new();

    for kind in [TopologyKind::SiameseCanonical, TopologyKind::SiamesePractical] {
        let cfg = ModelConfig { n_layers: 4, ..ModelConfig::tiny(kind) };
        let mut params = init_params(&cfg).unwrap();
        perturb_norm_scales(&mut params, 8, 0.9);
        for (rx, ry) in stream_contribution_ratios(&cfg, &params).unwrap() {
            if (rx + ry - 1.0).abs() > RATIO_TOL {
                problems.push(format!("{kind} ratio {rx}+{ry}"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |shape: &[usize]| Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let x = rand(&[10, 8]);
    let u = rand(&[8, 7]);
    let fused = matmul(&rms_norm(&x, None, 0.0).unwrap(), &u).unwrap();
    let same = logit_lens_match(&x, &x, &fused, &u).unwrap();
    if (same.match_x, same.match_y) != (1.0, 1.0) {
        problems.push(format!("identical-stream lens {same:?}"));
    }

    let text = r#"{
        "model": {"topology": "siamese_practical", "n_layers": 2, "d_model": 16, "n_heads": 2, "vocab_size": 9, "seq_len": 8,
                  "fused_input_norm": true, "depth_scaling": true},
        "train": {"peak_lr": 0.01, "warmup_steps": 5, "total_steps": 40, "batch_size": 8, "eval_every": 10,
                  "dataset": {"copy": {"alphabet": 8, "len": 4, "n_examples": 128, "eval_fraction": 0.25}}},
        "output_dir": "unused"
    }"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let outcome = run_training(&cfg, &run_dir).unwrap();

    let lens = run_lens(&cfg, Some(&run_dir)).unwrap();
    for f in [lens.match_x, lens.match_y, lens.divergent_align_x, lens.divergent_align_y] {
        if !(0.0..=1.0).contains(&f) {
            problems.push(format!("lens fraction {f}"));
        }
    }

    let profile = run_profile(&cfg, Some(&run_dir), &dir.path().join("profile")).unwrap();
    let parsed = parse_profile_csv(&std::fs::read_to_string(dir.path().join("profile/profile.csv")).unwrap()).unwrap();
    if parsed != profile.rows || parse_profile_csv(&profile_to_csv(&parsed)).unwrap() != parsed {
        problems.push("profile.csv".into());
    }
    for row in &parsed[..parsed.len() - 1] {
        match (row.ratio_x, row.ratio_y) {
            (Some(rx), Some(ry)) if (rx + ry - 1.0).abs() <= RATIO_TOL => {}
            other => problems.push(format!("profile ratio row {}: {other:?}", row.layer_index)),
        }
    }

    let (header, rows) = read_csv(&run_dir.join("metrics.csv"));
    let back: Vec<(usize, f64, f64, f64, f64, Option<f64>)> = rows
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap(), r[4].parse().unwrap(), opt(&r[5])))
        .collect();
    let want: Vec<_> = outcome.metrics.iter().map(|m| (m.step, m.loss, m.lr, m.grad_norm, m.clip_factor, m.eval_acc)).collect();
    if header.len() != 6 || back != want || std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap() != metrics_to_csv(&outcome.metrics) {
        problems.push("metrics.csv".into());
    }

    let (_, rows) = read_csv(&run_dir.join("losses.csv"));
    let losses: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let steps: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    if losses != outcome.losses || steps != (1..=outcome.losses.len()).collect::<Vec<_>>() || losses_to_csv(&losses) != std::fs::read_to_string(run_dir.join("losses.csv")).unwrap() {
        problems.push("losses.csv".into());
    }

    let post = ExperimentConfig {
        model: ModelConfig { topology: TopologyKind::PostNorm, fused_input_norm: false, depth_scaling: false, ..cfg.model.clone() },
        ..cfg.clone()
    };
    let cmp_dir = dir.path().join("compare");
    let table = run_comparison(&[cfg.clone(), post], &cmp_dir, 1).unwrap();
    let (_, rows) = read_csv(&cmp_dir.join("comparison.csv"));
    let back: Vec<(String, f64, String, f64, Option<f64>)> =
        rows.iter().map(|r| (r[0].clone(), r[1].parse().unwrap(), r[2].clone(), r[3].parse().unwrap(), opt(&r[4]))).collect();
    let want: Vec<_> = table.iter().map(|r| (r.topology.clone(), r.lr, r.status.clone(), r.final_loss, r.eval_acc)).collect();
    if back != want || comparison_to_csv(&table) != std::fs::read_to_string(cmp_dir.join("comparison.csv")).unwrap() {
        problems.push("comparison.csv".into());
    }

    report(
        "analysis_artifacts",
        problems.is_empty(),
        format!(
            "ratios sum to 1 (tol {RATIO_TOL:e}), lens match_x={:.3} match_y={:.3}, identical streams match 1.0, 4 CSVs round-trip; problems {problems:?}",
            lens.match_x, lens.match_y
        ),
    );
}
