//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The test fails if any criterion fails.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rpo_core::config::RunConfig;
use rpo_core::diffusion::{make_schedule, BaseSnapshot, DenoiserModel, ModelConfig, ScheduleKind};
use rpo_core::eval::{EvalReport, SweepRow, TrendCheck};
use rpo_core::reward::{arithmetic_reward, bt_probability, harmonic_reward, sample_label, ScorePair};
use rpo_core::rng::stream;
use rpo_core::rpo::{pre_loss_fixed, read_train_log, PrefNoise};
use rpo_core::run::{self, PretrainRun, EVAL_REPORT, RUN_META, SWEEP_CSV, TRAIN_LOG, TUPLE_LOG};
use rpo_core::world::{build_world, DATA_DIM};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn sp(i: f64, t: f64) -> ScorePair {
    ScorePair { align_i: i, align_t: t }
}

fn golden_rewards() -> Outcome {
    let a = harmonic_reward(sp(0.9, 0.01), 0.5);
    let b = harmonic_reward(sp(0.7, 0.21), 0.5);
    let am_a = arithmetic_reward(sp(0.9, 0.01), 0.5);
    let am_b = arithmetic_reward(sp(0.7, 0.21), 0.5);
    let ok = (a - 0.020).abs() <= 1e-3
        && (b - 0.323).abs() <= 1e-3
        && (am_a - 0.455).abs() <= 1e-3
        && (am_b - 0.455).abs() <= 1e-3;
    outcome(
        ok,
        format!("harmonic {a:.4} and {b:.4}, arithmetic {am_a:.4} and {am_b:.4}"),
    )
}

/// Random batches with random β and labels, scored with the model equal to its base.
fn loss_identity() -> Outcome {
    let world = build_world(6, 0).unwrap();
    let schedule = make_schedule(100, ScheduleKind::Cosine).unwrap();
    let model = DenoiserModel::new(ModelConfig::default(), world.vocab.clone(), DATA_DIM, &schedule, 0).unwrap();
    let base = BaseSnapshot::new(&model);
    let mut r = stream(0, 1000);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = r.random_range(1..=8);
        let t: Vec<usize> = (0..2 * b).map(|_| r.random_range(1..=schedule.horizon())).collect();
        let x_t = ndarray::Array2::from_shape_fn((2 * b, DATA_DIM), |_| r.random_range(-2.0..2.0));
        let eps = ndarray::Array2::from_shape_fn((2 * b, DATA_DIM), |_| r.random_range(-2.0..2.0));
        let subject = &world.subjects[r.random_range(0..world.subjects.len())];
        let cond = model.encode(&world.subject_prompt(subject)).unwrap();
        let noise = PrefNoise {
            x_t,
            eps,
            t,
            cond: vec![cond; 2 * b],
            y: (0..b).map(|_| r.random_range(0..=1u8)).collect(),
        };
        let beta = 10f64.powf(r.random_range(-3.0..3.0));
        let loss = pre_loss_fixed(&model, &base, &noise, beta).loss;
        worst = worst.max((loss - std::f64::consts::LN_2).abs());
    }
    outcome(
        worst <= 1e-9,
        format!("max |loss - ln 2| = {worst:.2e} over 100 batches"),
    )
}

fn gradient_suite() -> Outcome {
    let mut worst = (String::new(), 0.0f64);
    for seed in common::SEEDS {
        for (name, err) in common::gradient_errors(seed) {
            if err >= worst.1 {
                worst = (format!("{name}, seed {seed}"), err);
            }
        }
    }
    let n = common::SLICES;
    outcome(
        worst.1 <= common::TOL,
        format!(
            "worst relative error {:.2e} ({}) over {n} slices x 5 seeds per loss",
            worst.1, worst.0
        ),
    )
}

fn reward_properties() -> Outcome {
    let mut r = stream(0, 1001);
    let mut violations = 0;
    for _ in 0..10_000 {
        let (si, st) = (r.random_range(1e-3..=1.0), r.random_range(1e-3..=1.0));
        let l: f64 = r.random_range(1e-3..0.999);
        let s = sp(si, st);
        let h = harmonic_reward(s, l);
        let bump = r.random_range(1e-6..0.5);
        let ok = h <= arithmetic_reward(s, l) + 1e-12
            && si.min(st) - 1e-12 <= h
            && h <= si.max(st) + 1e-12
            && (si + bump > 1.0 || harmonic_reward(sp(si + bump, st), l) > h)
            && (st + bump > 1.0 || harmonic_reward(sp(si, st + bump), l) > h)
            && harmonic_reward(s, 0.0) == st
            && harmonic_reward(s, 1.0) == si;
        violations += usize::from(!ok);
    }
    outcome(violations == 0, format!("{violations} violations over 10000 triples"))
}

fn bradley_terry_properties() -> Outcome {
    let mut r = stream(0, 1002);
    let (mut comp, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (a, b, c) = (
            r.random_range(-1.0..=1.0),
            r.random_range(-1.0..=1.0),
            r.random_range(-10.0..10.0),
        );
        comp = comp.max((bt_probability(a, b) + bt_probability(b, a) - 1.0).abs());
        shift = shift.max((bt_probability(a + c, b + c) - bt_probability(a, b)).abs());
    }
    let half = [-3.0, 0.0, 0.25, 1.0].iter().all(|&x| bt_probability(x, x) == 0.5);
    let mut freq_err = 0.0f64;
    for (k, p) in [0.1, 0.43, 0.5, 0.9].into_iter().enumerate() {
        let mut lr = stream(k as u64, 1003);
        let ones: u64 = (0..100_000).map(|_| u64::from(sample_label(p, &mut lr))).sum();
        freq_err = freq_err.max((ones as f64 / 1e5 - p).abs());
    }
    outcome(
        comp <= 1e-12 && shift <= 1e-12 && half && freq_err <= 0.01,
        format!("complement {comp:.1e}, shift {shift:.1e}, equal rewards give 0.5: {half}, label frequency error {freq_err:.4}"),
    )
}

fn trend_outcome(trends: &[TrendCheck]) -> Outcome {
    let lines: Vec<String> = trends.iter().map(ToString::to_string).collect();
    outcome(trends.iter().all(TrendCheck::passed), lines.join("; "))
}

/// Seeds whose selected checkpoint changes with λ_val; the others satisfy the
/// monotone trend only through ties.
fn sweep_outcome(trends: &[TrendCheck], dir: &Path) -> Outcome {
    let rows: Vec<SweepRow> = csv::Reader::from_path(dir.join(SWEEP_CSV))
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect();
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let varying = seeds
        .iter()
        .filter(|&&s| {
            let steps: Vec<usize> = rows.iter().filter(|r| r.seed == s).map(|r| r.best_step).collect();
            steps.windows(2).any(|w| w[0] != w[1])
        })
        .count();
    let o = trend_outcome(trends);
    outcome(
        o.passed,
        format!(
            "{}; selected checkpoint varies with lambda_val in {varying}/{} seeds",
            o.detail,
            seeds.len()
        ),
    )
}

fn meta(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(RUN_META)).unwrap()).unwrap()
}

fn run_name(dir: &Path) -> String {
    dir.file_name().unwrap().to_string_lossy().into_owned()
}

/// Metadata of two runs agree, and so do their charts once each chart's run
/// name is replaced. Charts are named after the run that holds them.
fn same_run(a: &Path, b: &Path) -> bool {
    let (mut ma, mut mb) = (meta(a), meta(b));
    let chart = |m: &mut serde_json::Value, dir: &Path| {
        let key = format!("{}.svg", run_name(dir));
        m["artifacts"].as_object_mut().unwrap().remove(&key);
        std::fs::read_to_string(dir.join(&key))
            .ok()
            .map(|svg| svg.replace(&run_name(dir), "RUN"))
    };
    let (ca, cb) = (chart(&mut ma, a), chart(&mut mb, b));
    ma == mb && ca == cb
}

fn count_lines(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}

/// Counts the protocol constants from the artifacts of a default finetune and eval.
fn protocol_constants(cfg: &RunConfig, root: &Path, base: &Path) -> (Outcome, PathBuf, PathBuf) {
    let ft = run::cmd_finetune(cfg, root, base, None, false).unwrap();
    let tuples = count_lines(&ft.dir.join(TUPLE_LOG));
    let log = read_train_log(&ft.dir.join(TRAIN_LOG)).unwrap();
    let validations = log.iter().filter(|r| r.val_reward.is_some()).count();
    let ev = run::cmd_eval(cfg, root, Some(&ft.selected), None).unwrap();
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(ev.dir.join(EVAL_REPORT)).unwrap()).unwrap();
    let per_prompt_ok = report.per_prompt.iter().all(|p| p.n_images == 4);
    let ok = tuples == 32
        && validations == 10
        && log.len() == 400
        && per_prompt_ok
        && report.n_images == 4 * report.per_prompt.len();
    let o = outcome(
        ok,
        format!(
            "{tuples} preference tuples, {validations} validations in {} steps, {} eval images over {} prompts",
            log.len(),
            report.n_images,
            report.per_prompt.len()
        ),
    );
    (o, ft.dir, ev.dir)
}

/// Reruns every subcommand with the same config and seed and compares run metadata,
/// which carries the SHA-256 of every artifact.
fn determinism(cfg: &RunConfig, root: &Path, first: &PretrainRun, runs: &[(&str, PathBuf)]) -> Outcome {
    let mut mismatched = Vec::new();
    let base = &first.checkpoint;
    let again = run::cmd_pretrain(cfg, root).unwrap();
    if !same_run(&again.dir, &first.dir) {
        mismatched.push("pretrain");
    }
    for (name, dir) in runs {
        let rerun = match *name {
            "finetune" => run::cmd_finetune(cfg, root, base, None, false).unwrap().dir,
            "eval" => {
                let ft = meta(&runs[0].1);
                let ckpt = runs[0].1.join(ft["details"]["selected_checkpoint"].as_str().unwrap());
                run::cmd_eval(cfg, root, Some(&ckpt), None).unwrap().dir
            }
            "plot" => run::cmd_plot(cfg, root, &runs[0].1).unwrap().dir,
            "ablate" => run::cmd_ablate(cfg, root, Some(base), 2, true).unwrap().dir,
            "sweep" => run::cmd_sweep(cfg, root, Some(base), 2).unwrap().dir,
            other => panic!("unknown command {other}"),
        };
        if !same_run(&rerun, dir) {
            mismatched.push(name);
        }
    }
    let n = runs.len() + 1;
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{n} subcommands reproduced identical artifact hashes")
        } else {
            format!("artifact hashes differ for {mismatched:?}")
        },
    )
}

fn report(id: usize, name: &str, o: &Outcome) {
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {id:>2} {name}: {} ({})",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    )
    .unwrap();
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        report(id, name, &o);
        results.push((id, name, o));
    };
    record(1, "golden reward values", golden_rewards());
    record(2, "preference loss equals ln 2 at the base", loss_identity());
    record(3, "analytic gradients match finite differences", gradient_suite());
    record(4, "harmonic reward properties", reward_properties());
    record(5, "Bradley-Terry properties", bradley_terry_properties());

    let cfg = RunConfig::default();
    let root = tempfile::tempdir().unwrap();
    let pre = run::cmd_pretrain(&cfg, root.path()).unwrap();
    let ablate = run::cmd_ablate(&cfg, root.path(), Some(&pre.checkpoint), 1, true).unwrap();
    let (ablation, early): (Vec<TrendCheck>, Vec<TrendCheck>) = ablate
        .trends
        .iter()
        .cloned()
        .partition(|t| t.name.contains("full_rpo") || t.name.contains("pure_sim") || t.name.contains("completed"));
    record(6, "ablation trend over 5 seeds", trend_outcome(&ablation));
    let sweep = run::cmd_sweep(&cfg, root.path(), Some(&pre.checkpoint), 1).unwrap();
    record(
        7,
        "validation weight sweep trend",
        sweep_outcome(&sweep.trends, &sweep.dir),
    );
    record(8, "early stopping in the doubled-step regime", trend_outcome(&early));

    let (constants, ft_dir, ev_dir) = protocol_constants(&cfg, root.path(), &pre.checkpoint);
    record(9, "protocol constants", constants);
    let plot = run::cmd_plot(&cfg, root.path(), &ft_dir).unwrap();
    let runs = [
        ("finetune", ft_dir),
        ("eval", ev_dir),
        ("plot", plot.dir),
        ("ablate", ablate.dir),
        ("sweep", sweep.dir),
    ];
    record(
        10,
        "determinism of every subcommand",
        determinism(&cfg, root.path(), &pre, &runs),
    );

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
