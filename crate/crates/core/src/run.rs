//! Run-directory layout and the operations behind each CLI subcommand.
//!
//! Every invocation writes into a fresh directory `<command>-<hash8>-<n>`
//! under the output root, where `hash8` is the first eight hex digits of the
//! config content hash and `n` the first unused index. Earlier run
//! directories are only ever read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diffusion::pretrain::write_pretrain_log;
use crate::diffusion::{pretrain, Checkpoint, DenoiserModel, NoiseSchedule, RngCounters};
use crate::error::{field, Result, RpoError};
use crate::eval::{
    ablation_trends, early_stopping_trends, evaluate, export_reward_curve, run_ablation, run_early_stopping_check,
    run_lambda_sweep, sweep_trends, DiffusionGenerator, EarlyStopRow, EvalReport, Experiment, TrendCheck,
};
use crate::rpo::{bind_subject, train_rpo, write_train_log, write_tuple_log, FinetuneState};
use crate::world::{OracleEmbedder, SubjectSpec, SubjectWorld, DATA_DIM};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const WORLD_FILE: &str = "world.json";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TUPLE_LOG: &str = "preference_tuples.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RUN_META: &str = "run.json";
pub const REWARD_CURVE_CSV: &str = "reward_curve.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_SUMMARY_CSV: &str = "ablation_summary.csv";
pub const EARLY_STOPPING_CSV: &str = "early_stopping.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";
pub const TRENDS_FILE: &str = "trends.txt";
/// Subdirectory of an ablation run holding one training log per arm and seed.
pub const ARM_LOGS_DIR: &str = "arms";

/// Environment variable naming the output root when no flag or config value is given.
pub const OUTPUT_ROOT_ENV: &str = "RPO_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Output root: explicit flag, then the environment, then the config, then `runs`.
pub fn output_root(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Creates `<root>/<command>-<hash8>-<n>` with the first free `n`.
pub fn create_run_dir(root: &Path, command: &str, config_hash: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let short = &config_hash[..config_hash.len().min(8)];
    for n in 0.. {
        let dir = root.join(format!("{command}-{short}-{n}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run index space exhausted")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Contents of `run.json`. Holds no paths or clocks so reruns compare equal.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub details: BTreeMap<String, serde_json::Value>,
}

/// An open run directory and the metadata accumulated for it.
pub struct Run {
    pub dir: PathBuf,
    meta: RunMeta,
}

impl Run {
    /// Creates the directory and writes the config snapshot.
    pub fn start(root: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        let hash = cfg.content_hash();
        let dir = create_run_dir(root, command, &hash)?;
        let mut run = Self {
            dir,
            meta: RunMeta {
                command: command.to_string(),
                seed: cfg.seed,
                config_hash: hash,
                artifacts: BTreeMap::new(),
                details: BTreeMap::new(),
            },
        };
        let mut snapshot = cfg.clone();
        snapshot.output = None;
        snapshot.save(&run.path(CONFIG_SNAPSHOT))?;
        run.record(CONFIG_SNAPSHOT)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config_hash(&self) -> &str {
        &self.meta.config_hash
    }

    /// Hashes an artifact already written under the run directory.
    pub fn record(&mut self, name: &str) -> Result<String> {
        let sha = sha256_file(&self.path(name))?;
        self.meta.artifacts.insert(name.to_string(), sha.clone());
        Ok(sha)
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.meta.details.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        std::fs::write(self.path(RUN_META), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(self.dir)
    }
}

/// World, schedule and base weights shared by the finetuning commands.
pub struct Setup {
    pub world: SubjectWorld,
    pub schedule: NoiseSchedule,
    pub base: DenoiserModel,
    pub base_sha256: String,
}

impl Setup {
    pub fn subject(&self, id: Option<&str>) -> Result<&SubjectSpec> {
        match id {
            None => Ok(self.world.held_out_subject()),
            Some(id) if id == self.world.held_out => self.world.subject(id),
            Some(id) => Err(field(
                "subject",
                format!(
                    "`{id}` was seen in pretraining; finetune the held-out subject `{}`",
                    self.world.held_out
                ),
            )),
        }
    }
}

/// Loads a base checkpoint and checks it against the configured world and schedule.
pub fn load_base(cfg: &RunConfig, path: &Path) -> Result<Setup> {
    let ck = Checkpoint::load(path)?;
    let world = cfg.world.build()?;
    if ck.model.vocab != world.vocab {
        return Err(field(
            "world",
            "checkpoint vocabulary does not match the configured world",
        ));
    }
    if ck.schedule != cfg.schedule.build()? {
        return Err(field(
            "schedule",
            "checkpoint schedule does not match the configured schedule",
        ));
    }
    Ok(Setup {
        world,
        schedule: ck.schedule,
        base: ck.model,
        base_sha256: sha256_file(path)?,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Builds the world, pretrains the base and writes it with its loss log into `run`.
fn pretrain_into(cfg: &RunConfig, run: &mut Run) -> Result<(Setup, PathBuf, f64, f64)> {
    let world = cfg.world.build()?;
    let schedule = cfg.schedule.build()?;
    world.save_json(&run.path(WORLD_FILE))?;
    run.record(WORLD_FILE)?;
    let out = pretrain(&world, &schedule, &cfg.model, &cfg.pretrain, cfg.seed)?;
    write_pretrain_log(&run.path(PRETRAIN_LOG), &out.log)?;
    run.record(PRETRAIN_LOG)?;
    let ck = Checkpoint {
        model: out.model,
        schedule,
        counters: RngCounters {
            seed: cfg.seed,
            step: cfg.pretrain.steps as u64,
            streams: vec![("pretrain".into(), format!("{} batches", cfg.pretrain.steps))],
        },
    };
    let path = run.path(BASE_CHECKPOINT);
    let sha = ck.save(&path)?;
    run.record(BASE_CHECKPOINT)?;
    run.detail("held_out_subject", &world.held_out)?;
    run.detail("initial_heldout_loss", out.initial_heldout_loss)?;
    run.detail("final_heldout_loss", out.final_heldout_loss)?;
    let setup = Setup {
        world,
        schedule: ck.schedule,
        base: ck.model,
        base_sha256: sha,
    };
    Ok((setup, path, out.initial_heldout_loss, out.final_heldout_loss))
}

pub fn cmd_pretrain(cfg: &RunConfig, root: &Path) -> Result<PretrainRun> {
    cfg.validate()?;
    let mut run = Run::start(root, "pretrain", cfg)?;
    let (setup, checkpoint, initial_loss, final_loss) = pretrain_into(cfg, &mut run)?;
    let dir = run.finish()?;
    Ok(PretrainRun {
        checkpoint: dir.join(checkpoint.file_name().expect("file name")),
        checkpoint_sha256: setup.base_sha256,
        dir,
        initial_loss,
        final_loss,
    })
}

/// Uses the given base checkpoint, or pretrains one inside `run`.
fn base_for(cfg: &RunConfig, base: Option<&Path>, run: &mut Run) -> Result<Setup> {
    match base {
        Some(p) => {
            let setup = load_base(cfg, p)?;
            run.detail("base_checkpoint_sha256", &setup.base_sha256)?;
            Ok(setup)
        }
        None => Ok(pretrain_into(cfg, run)?.0),
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub dir: PathBuf,
    /// Best checkpoint with early stopping, final checkpoint without.
    pub selected: PathBuf,
    pub best_step: usize,
    pub best_reward: f64,
    pub n_validations: usize,
    pub n_negatives: usize,
}

fn save_model(
    run: &mut Run,
    name: &str,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    seed: u64,
    step: usize,
) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        schedule: schedule.clone(),
        counters: RngCounters {
            seed,
            step: step as u64,
            streams: vec![("train".into(), format!("{step} steps"))],
        },
    };
    ck.save(&run.path(name))?;
    run.record(name)?;
    Ok(())
}

fn write_finetune_artifacts(
    run: &mut Run,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    st: &FinetuneState,
) -> Result<()> {
    write_train_log(&run.path(TRAIN_LOG), &st.log)?;
    run.record(TRAIN_LOG)?;
    write_tuple_log(&run.path(TUPLE_LOG), &st.tuples)?;
    run.record(TUPLE_LOG)?;
    save_model(run, BEST_CHECKPOINT, &st.best_model, schedule, cfg.seed, st.best_step)?;
    save_model(run, FINAL_CHECKPOINT, &st.final_model, schedule, cfg.seed, st.step)?;
    let dir = run.dir.clone();
    let (_, svg) = export_reward_curve(&dir, &dir)?;
    run.record(REWARD_CURVE_CSV)?;
    run.record(&svg.file_name().expect("file name").to_string_lossy())?;
    run.detail("best_step", st.best_step)?;
    run.detail("best_reward", st.best_reward)?;
    run.detail("final_reward", st.final_reward())?;
    run.detail("validations", &st.validations)?;
    run.detail("n_negatives", st.negatives.len())?;
    run.detail("n_tuples", st.tuples.len())?;
    run.detail(
        "validation_protocol",
        format!(
            "the {} training prompts, {} samples each, deterministic sampler with {} steps, lambda_val {}",
            cfg.train.n_train_prompts, cfg.train.n_val_images_per_prompt, cfg.train.val_steps, cfg.reward.lambda_val
        ),
    )?;
    Ok(())
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    root: &Path,
    base: &Path,
    subject: Option<&str>,
    no_early_stop: bool,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let setup = load_base(cfg, base)?;
    let subject = setup.subject(subject)?.clone();
    let mut cfg = cfg.clone();
    if no_early_stop {
        cfg.train.early_stopping = false;
    }
    let mut run = Run::start(root, "finetune", &cfg)?;
    run.detail("base_checkpoint_sha256", &setup.base_sha256)?;
    run.detail("subject", &subject.subject_id)?;
    let embedder = OracleEmbedder::new(&setup.world);
    let st = train_rpo(
        &setup.world,
        &setup.base,
        &subject,
        &setup.schedule,
        &cfg.train,
        &cfg.reward,
        &embedder,
        cfg.seed,
    )?;
    write_finetune_artifacts(&mut run, &cfg, &setup.schedule, &st)?;
    let selected = if cfg.train.early_stopping {
        BEST_CHECKPOINT
    } else {
        FINAL_CHECKPOINT
    };
    run.detail("selected_checkpoint", selected)?;
    let dir = run.finish()?;
    Ok(FinetuneRun {
        selected: dir.join(selected),
        dir,
        best_step: st.best_step,
        best_reward: st.best_reward,
        n_validations: st.validations.len(),
        n_negatives: st.negatives.len(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Evaluates a checkpoint, or a freshly initialized model when none is given.
pub fn cmd_eval(cfg: &RunConfig, root: &Path, checkpoint: Option<&Path>, subject: Option<&str>) -> Result<EvalRun> {
    cfg.validate()?;
    let (world, schedule, model, sha) = match checkpoint {
        Some(p) => {
            let s = load_base(cfg, p)?;
            (s.world, s.schedule, s.base, Some(s.base_sha256))
        }
        None => {
            let world = cfg.world.build()?;
            let schedule = cfg.schedule.build()?;
            let model = DenoiserModel::new(cfg.model.clone(), world.vocab.clone(), DATA_DIM, &schedule, cfg.seed)?;
            (world, schedule, model, None)
        }
    };
    let subject = match subject {
        None => world.held_out_subject(),
        Some(id) => world.subject(id)?,
    };
    // Idempotent for checkpoints finetuned under the same config.
    let model = bind_subject(&model, subject, cfg.train.new_token_init, cfg.seed)?;
    let mut run = Run::start(root, "eval", cfg)?;
    run.detail("checkpoint_sha256", &sha)?;
    run.detail("subject", &subject.subject_id)?;
    let embedder = OracleEmbedder::new(&world);
    let refs: Vec<Vec<f64>> = world
        .reference_images(subject, cfg.train.n_references, cfg.seed)
        .into_iter()
        .map(|r| r.pixels)
        .collect();
    let generator = DiffusionGenerator {
        model: &model,
        schedule: &schedule,
        kind: cfg.eval.sampler,
        n_steps: cfg.eval.sampler_steps,
    };
    let report = evaluate(
        &generator,
        &world.eval_prompts(subject),
        &refs,
        cfg.eval.n_per_prompt,
        &embedder,
        cfg.seed,
        run.config_hash(),
    )?;
    std::fs::write(run.path(EVAL_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
    run.record(EVAL_REPORT)?;
    Ok(EvalRun {
        dir: run.finish()?,
        report,
    })
}

/// A command whose outcome includes trend assertions.
#[derive(Debug, Clone)]
pub struct TrendRun {
    pub dir: PathBuf,
    pub trends: Vec<TrendCheck>,
}

impl TrendRun {
    pub fn all_passed(&self) -> bool {
        self.trends.iter().all(TrendCheck::passed)
    }
}

fn write_trends(run: &mut Run, trends: &[TrendCheck]) -> Result<()> {
    let text: String = trends.iter().map(|t| format!("{t}\n")).collect();
    std::fs::write(run.path(TRENDS_FILE), text)?;
    run.record(TRENDS_FILE)?;
    run.detail("trends_passed", trends.iter().all(TrendCheck::passed))
}

fn experiment<'a>(cfg: &RunConfig, setup: &'a Setup, embedder: &'a OracleEmbedder, hash: &str) -> Experiment<'a> {
    Experiment {
        world: &setup.world,
        base: &setup.base,
        subject: setup.world.held_out_subject(),
        schedule: &setup.schedule,
        embedder,
        train: cfg.train.clone(),
        reward: cfg.reward.clone(),
        eval: cfg.eval.clone(),
        config_hash: hash.to_string(),
    }
}

fn write_early_stopping_csv(path: &Path, rows: &[EarlyStopRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Four-arm ablation over the configured seeds, optionally followed by the
/// doubled-length early-stopping check.
pub fn cmd_ablate(
    cfg: &RunConfig,
    root: &Path,
    base: Option<&Path>,
    jobs: usize,
    overfit_check: bool,
) -> Result<TrendRun> {
    cfg.validate()?;
    let mut run = Run::start(root, "ablate", cfg)?;
    let setup = base_for(cfg, base, &mut run)?;
    let embedder = OracleEmbedder::new(&setup.world);
    let hash = run.config_hash().to_string();
    let exp = experiment(cfg, &setup, &embedder, &hash);
    let grid = run_ablation(&exp, &cfg.eval.seeds, jobs)?;
    grid.write_csv(&run.path(ABLATION_CSV))?;
    run.record(ABLATION_CSV)?;
    let mut w = csv::Writer::from_path(run.path(ABLATION_SUMMARY_CSV))?;
    w.write_record([
        "arm",
        "n_seeds",
        "image_sim_mean",
        "image_sim_std",
        "text_sim_mean",
        "text_sim_std",
        "harmonic_03_mean",
        "harmonic_03_std",
    ])?;
    for (arm, i, t, h) in grid.summary() {
        let n = grid.rows.iter().filter(|r| r.arm == arm).count();
        w.write_record([
            arm.name().to_string(),
            n.to_string(),
            i.mean.to_string(),
            i.std.to_string(),
            t.mean.to_string(),
            t.std.to_string(),
            h.mean.to_string(),
            h.std.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    run.record(ABLATION_SUMMARY_CSV)?;
    std::fs::create_dir_all(run.path(ARM_LOGS_DIR))?;
    for (arm, seed, log) in &grid.logs {
        let name = format!("{ARM_LOGS_DIR}/{arm}-seed{seed}.csv");
        write_train_log(&run.path(&name), log)?;
        run.record(&name)?;
    }
    run.detail("failures", &grid.failures)?;
    let mut trends = ablation_trends(&grid);
    if !grid.is_complete() {
        trends.push(TrendCheck {
            name: "every ablation run completed".into(),
            wins: grid.rows.len(),
            total: grid.rows.len() + grid.failures.len(),
            required: grid.rows.len() + grid.failures.len(),
        });
    }
    if overfit_check {
        let rows = run_early_stopping_check(&exp, &cfg.eval.seeds, cfg.eval.overfit_step_factor, jobs)?;
        write_early_stopping_csv(&run.path(EARLY_STOPPING_CSV), &rows)?;
        run.record(EARLY_STOPPING_CSV)?;
        trends.extend(early_stopping_trends(&rows));
    }
    write_trends(&mut run, &trends)?;
    Ok(TrendRun {
        dir: run.finish()?,
        trends,
    })
}

pub fn cmd_sweep(cfg: &RunConfig, root: &Path, base: Option<&Path>, jobs: usize) -> Result<TrendRun> {
    cfg.validate()?;
    let mut run = Run::start(root, "sweep", cfg)?;
    let setup = base_for(cfg, base, &mut run)?;
    let embedder = OracleEmbedder::new(&setup.world);
    let hash = run.config_hash().to_string();
    let exp = experiment(cfg, &setup, &embedder, &hash);
    let report = run_lambda_sweep(&exp, &cfg.eval.lambda_sweep, &cfg.eval.seeds, jobs)?;
    report.write_csv(&run.path(SWEEP_CSV))?;
    run.record(SWEEP_CSV)?;
    report.write_summary_csv(&run.path(SWEEP_SUMMARY_CSV))?;
    run.record(SWEEP_SUMMARY_CSV)?;
    let trends = sweep_trends(&report);
    write_trends(&mut run, &trends)?;
    Ok(TrendRun {
        dir: run.finish()?,
        trends,
    })
}

#[derive(Debug, Clone)]
pub struct PlotRun {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Exports the validation-reward curve of a finished finetune run.
pub fn cmd_plot(cfg: &RunConfig, root: &Path, finetune_dir: &Path) -> Result<PlotRun> {
    let log = finetune_dir.join(TRAIN_LOG);
    if !log.exists() {
        return Err(RpoError::MissingFile(log));
    }
    let mut run = Run::start(root, "plot", cfg)?;
    let (csv, svg) = export_reward_curve(finetune_dir, &run.dir)?;
    run.record(REWARD_CURVE_CSV)?;
    let svg_name = svg.file_name().expect("file name").to_string_lossy().into_owned();
    run.record(&svg_name)?;
    run.detail(
        "source_run",
        finetune_dir.file_name().map(|n| n.to_string_lossy().into_owned()),
    )?;
    run.detail("source_train_log_sha256", sha256_file(&log)?)?;
    Ok(PlotRun {
        dir: run.finish()?,
        csv,
        svg,
    })
}

/// Writes the default config; refuses to overwrite unless `force`.
pub fn init_config(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(RpoError::InvalidArgument(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    RunConfig::default().save(path)
}
