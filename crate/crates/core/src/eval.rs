//! Evaluation protocol: fidelity scores, the regularization ablation, the
//! validation-weight sweep and reward-curve exports.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_batch, DenoiserModel, NoisePredictor, NoiseSchedule, SamplerKind};
use crate::error::{field, invalid, Result, RpoError};
use crate::reward::RewardConfig;
use crate::reward::{harmonic_reward, score_pair};
use crate::rng::{self, streams, LabRng};
use crate::rpo::{read_train_log, train_rpo, FinetuneState, TrainConfig, TrainLogRow};
use crate::world::{OracleEmbedder, PromptSpec, SubjectSpec, SubjectWorld};

/// Weight on image alignment in the headline harmonic score.
pub const REPORT_LAMBDA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_prompt: usize,
    pub sampler: SamplerKind,
    pub sampler_steps: usize,
    pub seeds: Vec<u64>,
    pub lambda_sweep: Vec<f64>,
    /// Step multiplier for the overfitting-regime early-stopping check.
    pub overfit_step_factor: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_prompt: 4,
            sampler: SamplerKind::Ancestral,
            sampler_steps: 100,
            seeds: vec![0, 1, 2, 3, 4],
            lambda_sweep: vec![0.3, 0.5, 0.7],
            overfit_step_factor: 2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_per_prompt", self.n_per_prompt),
            ("sampler_steps", self.sampler_steps),
            ("overfit_step_factor", self.overfit_step_factor),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "must not be empty"));
        }
        if self.lambda_sweep.is_empty() || self.lambda_sweep.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(field("lambda_sweep", "must be a non-empty list of values in [0, 1]"));
        }
        Ok(())
    }
}

/// Anything that can produce images for prompts.
pub trait Generator {
    /// `n_per_prompt` images per prompt, prompt-major.
    fn generate(&self, prompts: &[PromptSpec], n_per_prompt: usize, rng: &mut LabRng) -> Result<Vec<Vec<f64>>>;
}

/// Samples a denoiser with a fixed sampler.
pub struct DiffusionGenerator<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub kind: SamplerKind,
    pub n_steps: usize,
}

impl Generator for DiffusionGenerator<'_> {
    fn generate(&self, prompts: &[PromptSpec], n_per_prompt: usize, rng: &mut LabRng) -> Result<Vec<Vec<f64>>> {
        let mut conds = Vec::with_capacity(prompts.len() * n_per_prompt);
        for p in prompts {
            let c = self.model.encode(p)?;
            conds.extend(std::iter::repeat_n(c, n_per_prompt));
        }
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let x = sample_batch(self.model, &conds, self.schedule, self.n_steps, self.kind, rng)?;
        debug_assert_eq!(x.ncols(), self.model.data_dim());
        Ok(x.outer_iter().map(|r| r.to_vec()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt: String,
    pub image_sim: f64,
    pub text_sim: f64,
    pub harmonic_03: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_sim: f64,
    pub text_sim: f64,
    pub harmonic_03: f64,
    pub per_prompt: Vec<PromptScore>,
    pub n_images: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Scores `n_per_prompt` generations per prompt against the references.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<G: Generator + ?Sized>(
    generator: &G,
    prompts: &[PromptSpec],
    references: &[Vec<f64>],
    n_per_prompt: usize,
    embedder: &OracleEmbedder,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    if prompts.is_empty() || n_per_prompt == 0 {
        return Err(invalid("evaluation needs prompts and a positive sample count"));
    }
    let ref_embs = references
        .iter()
        .map(|r| embedder.embed_image(r))
        .collect::<Result<Vec<_>>>()?;
    let images = generator.generate(prompts, n_per_prompt, &mut rng::stream(seed, streams::EVAL))?;
    if images.len() != prompts.len() * n_per_prompt {
        return Err(invalid("generator returned the wrong number of images"));
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    for (p, chunk) in prompts.iter().zip(images.chunks(n_per_prompt)) {
        let (mut si, mut st, mut h) = (0.0, 0.0, 0.0);
        for x in chunk {
            let sp = score_pair(x, p, &ref_embs, embedder)?;
            si += sp.align_i;
            st += sp.align_t;
            h += harmonic_reward(sp, REPORT_LAMBDA);
        }
        let n = chunk.len() as f64;
        per_prompt.push(PromptScore {
            prompt: p.to_string(),
            image_sim: si / n,
            text_sim: st / n,
            harmonic_03: h / n,
            n_images: chunk.len(),
        });
    }
    let k = per_prompt.len() as f64;
    Ok(EvalReport {
        image_sim: per_prompt.iter().map(|p| p.image_sim).sum::<f64>() / k,
        text_sim: per_prompt.iter().map(|p| p.text_sim).sum::<f64>() / k,
        harmonic_03: per_prompt.iter().map(|p| p.harmonic_03).sum::<f64>() / k,
        n_images: images.len(),
        per_prompt,
        seed,
        config_hash: config_hash.to_string(),
    })
}

/// Everything a finetune-then-evaluate run needs besides its flags and seed.
pub struct Experiment<'a> {
    pub world: &'a SubjectWorld,
    pub base: &'a DenoiserModel,
    pub subject: &'a SubjectSpec,
    pub schedule: &'a NoiseSchedule,
    pub embedder: &'a OracleEmbedder,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: FinetuneState,
    pub report: EvalReport,
}

impl Experiment<'_> {
    /// Finetunes with the given configs and evaluates the selected checkpoint.
    pub fn run(&self, train: &TrainConfig, reward: &RewardConfig, seed: u64) -> Result<RunResult> {
        let state = train_rpo(
            self.world,
            self.base,
            self.subject,
            self.schedule,
            train,
            reward,
            self.embedder,
            seed,
        )?;
        let report = self.evaluate_model(&state.model, &state, seed)?;
        Ok(RunResult { state, report })
    }

    pub fn evaluate_model(&self, model: &DenoiserModel, state: &FinetuneState, seed: u64) -> Result<EvalReport> {
        let generator = DiffusionGenerator {
            model,
            schedule: self.schedule,
            kind: self.eval.sampler,
            n_steps: self.eval.sampler_steps,
        };
        let refs: Vec<Vec<f64>> = state.references.iter().map(|r| r.pixels.clone()).collect();
        evaluate(
            &generator,
            &self.world.eval_prompts(self.subject),
            &refs,
            self.eval.n_per_prompt,
            self.embedder,
            seed,
            &self.config_hash,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    PureSim,
    PrefNoEarlystop,
    EarlystopNoPref,
    FullRpo,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::PureSim, Arm::PrefNoEarlystop, Arm::EarlystopNoPref, Arm::FullRpo];

    /// `(use_pref_loss, early_stopping)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Arm::PureSim => (false, false),
            Arm::PrefNoEarlystop => (true, false),
            Arm::EarlystopNoPref => (false, true),
            Arm::FullRpo => (true, true),
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (use_pref_loss, early_stopping) = self.flags();
        TrainConfig {
            use_pref_loss,
            early_stopping,
            ..cfg.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::PureSim => "pure_sim",
            Arm::PrefNoEarlystop => "pref_no_earlystop",
            Arm::EarlystopNoPref => "earlystop_no_pref",
            Arm::FullRpo => "full_rpo",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub image_sim: f64,
    pub text_sim: f64,
    pub harmonic_03: f64,
    pub best_step: usize,
    pub selected_step: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub failures: Vec<(Arm, u64, String)>,
    /// Training log of every completed run.
    pub logs: Vec<(Arm, u64, Vec<TrainLogRow>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt() }
}

impl AblationGrid {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn get(&self, arm: Arm, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Per-arm `(image_sim, text_sim, harmonic_03)` summaries.
    pub fn summary(&self) -> Vec<(Arm, MeanStd, MeanStd, MeanStd)> {
        Arm::ALL
            .iter()
            .map(|&arm| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.arm == arm).collect();
                let pick = |f: fn(&AblationRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                (
                    arm,
                    pick(|r| r.image_sim),
                    pick(|r| r.text_sim),
                    pick(|r| r.harmonic_03),
                )
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["arm", "seed", "image_sim", "text_sim", "harmonic_03"])?;
        for r in &self.rows {
            w.write_record([
                r.arm.name().to_string(),
                r.seed.to_string(),
                r.image_sim.to_string(),
                r.text_sim.to_string(),
                r.harmonic_03.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every arm for every seed. Failed runs are recorded, not fatal.
pub fn run_ablation(exp: &Experiment<'_>, seeds: &[u64], jobs: usize) -> Result<AblationGrid> {
    if seeds.len() < 3 {
        return Err(invalid("the ablation needs at least 3 seeds"));
    }
    let tasks: Vec<(Arm, u64)> = Arm::ALL
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<(Arm, u64, Result<RunResult>)> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(arm, seed)| (arm, seed, exp.run(&arm.apply(&exp.train), &exp.reward, seed)))
            .collect()
    })?;
    let mut grid = AblationGrid::default();
    for (arm, seed, res) in results {
        match res {
            Ok(r) => {
                grid.rows.push(AblationRow {
                    arm,
                    seed,
                    image_sim: r.report.image_sim,
                    text_sim: r.report.text_sim,
                    harmonic_03: r.report.harmonic_03,
                    best_step: r.state.best_step,
                    selected_step: if arm.flags().1 { r.state.best_step } else { r.state.step },
                });
                grid.logs.push((arm, seed, r.state.log));
            }
            Err(e) => grid.failures.push((arm, seed, e.to_string())),
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_val: f64,
    pub seed: u64,
    pub image_sim: f64,
    pub text_sim: f64,
    pub harmonic_03: f64,
    pub best_step: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub lambda_val: f64,
    pub n_seeds: usize,
    pub image_sim_mean: f64,
    pub image_sim_std: f64,
    pub text_sim_mean: f64,
    pub text_sim_std: f64,
    pub harmonic_03_mean: f64,
    pub harmonic_03_std: f64,
}

impl SweepReport {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn get(&self, lambda: f64, seed: u64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.lambda_val == lambda && r.seed == seed)
    }

    pub fn summary(&self) -> Vec<SweepSummaryRow> {
        self.lambdas
            .iter()
            .map(|&l| {
                let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.lambda_val == l).collect();
                let col = |f: fn(&SweepRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (i, t, h) = (col(|r| r.image_sim), col(|r| r.text_sim), col(|r| r.harmonic_03));
                SweepSummaryRow {
                    lambda_val: l,
                    n_seeds: rows.len(),
                    image_sim_mean: i.mean,
                    image_sim_std: i.std,
                    text_sim_mean: t.mean,
                    text_sim_std: t.std,
                    harmonic_03_mean: h.mean,
                    harmonic_03_std: h.std,
                }
            })
            .collect()
    }

    /// Per-seed rows to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per validation weight to `path`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.summary() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One full run per `(λ_val, seed)`.
pub fn run_lambda_sweep(exp: &Experiment<'_>, lambdas: &[f64], seeds: &[u64], jobs: usize) -> Result<SweepReport> {
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(invalid("validation weights must lie in [0, 1]"));
    }
    let tasks: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let train = TrainConfig {
        use_pref_loss: true,
        early_stopping: true,
        ..exp.train.clone()
    };
    let results: Vec<Result<SweepRow>> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(l, seed)| {
                let reward = RewardConfig {
                    lambda_val: l,
                    ..exp.reward.clone()
                };
                let r = exp.run(&train, &reward, seed)?;
                Ok(SweepRow {
                    lambda_val: l,
                    seed,
                    image_sim: r.report.image_sim,
                    text_sim: r.report.text_sim,
                    harmonic_03: r.report.harmonic_03,
                    best_step: r.state.best_step,
                })
            })
            .collect()
    })?;
    Ok(SweepReport {
        lambdas: lambdas.to_vec(),
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Outcome of a majority-vote trend assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub wins: usize,
    pub total: usize,
    pub required: usize,
}

impl TrendCheck {
    pub fn passed(&self) -> bool {
        self.wins >= self.required
    }
}

impl fmt::Display for TrendCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}/{} seeds (need {}) {}",
            self.name,
            self.wins,
            self.total,
            self.required,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Required wins out of `n` seeds for a 4-of-5 style majority.
pub fn strong_majority(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

pub fn ablation_trends(grid: &AblationGrid) -> Vec<TrendCheck> {
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = grid.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let pairs: Vec<(&AblationRow, &AblationRow)> = seeds
        .iter()
        .filter_map(|&s| Some((grid.get(Arm::FullRpo, s)?, grid.get(Arm::PureSim, s)?)))
        .collect();
    let n = seeds.len();
    let count = |f: &dyn Fn(&AblationRow, &AblationRow) -> bool| pairs.iter().filter(|(a, b)| f(a, b)).count();
    vec![
        TrendCheck {
            name: "full_rpo text_sim > pure_sim text_sim".into(),
            wins: count(&|f, p| f.text_sim > p.text_sim),
            total: n,
            required: strong_majority(n),
        },
        TrendCheck {
            name: "full_rpo harmonic_03 > pure_sim harmonic_03".into(),
            wins: count(&|f, p| f.harmonic_03 > p.harmonic_03),
            total: n,
            required: strong_majority(n),
        },
        TrendCheck {
            name: "pure_sim image_sim > full_rpo image_sim".into(),
            wins: count(&|f, p| p.image_sim > f.image_sim),
            total: n,
            required: strong_majority(n),
        },
    ]
}

/// Per seed: image_sim non-decreasing and text_sim non-increasing as λ_val grows.
pub fn sweep_trends(report: &SweepReport) -> Vec<TrendCheck> {
    let mut lambdas = report.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    let seeds = report.seeds();
    let wins = seeds
        .iter()
        .filter(|&&s| {
            let rows: Option<Vec<&SweepRow>> = lambdas.iter().map(|&l| report.get(l, s)).collect();
            rows.is_some_and(|rows| {
                rows.windows(2)
                    .all(|w| w[1].image_sim >= w[0].image_sim && w[1].text_sim <= w[0].text_sim)
            })
        })
        .count();
    vec![TrendCheck {
        name: "image_sim non-decreasing and text_sim non-increasing in lambda_val".into(),
        wins,
        total: seeds.len(),
        required: strong_majority(seeds.len()),
    }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopRow {
    pub seed: u64,
    pub max_steps: usize,
    pub best_step: usize,
    pub best_reward: f64,
    pub final_reward: f64,
    pub n_validations: usize,
    pub dominates: bool,
}

/// Full RPO with `max_steps` multiplied by `factor`, recording best vs final validation.
pub fn run_early_stopping_check(
    exp: &Experiment<'_>,
    seeds: &[u64],
    factor: usize,
    jobs: usize,
) -> Result<Vec<EarlyStopRow>> {
    let train = TrainConfig {
        max_steps: exp.train.max_steps * factor.max(1),
        ..Arm::FullRpo.apply(&exp.train)
    };
    let rows: Vec<Result<EarlyStopRow>> = with_pool(jobs, || {
        seeds
            .par_iter()
            .map(|&seed| {
                let st = train_rpo(
                    exp.world,
                    exp.base,
                    exp.subject,
                    exp.schedule,
                    &train,
                    &exp.reward,
                    exp.embedder,
                    seed,
                )?;
                let final_reward = st.final_reward().unwrap_or(f64::NAN);
                Ok(EarlyStopRow {
                    seed,
                    max_steps: train.max_steps,
                    best_step: st.best_step,
                    best_reward: st.best_reward,
                    final_reward,
                    n_validations: st.validations.len(),
                    dominates: st.validations.iter().all(|v| st.best_reward >= v.1),
                })
            })
            .collect()
    })?;
    rows.into_iter().collect()
}

pub fn early_stopping_trends(rows: &[EarlyStopRow]) -> Vec<TrendCheck> {
    let n = rows.len();
    vec![
        TrendCheck {
            name: "best validation reward > final validation reward".into(),
            wins: rows.iter().filter(|r| r.best_reward > r.final_reward).count(),
            total: n,
            required: (3 * n).div_ceil(5),
        },
        TrendCheck {
            name: "best checkpoint dominates every validation".into(),
            wins: rows.iter().filter(|r| r.dominates).count(),
            total: n,
            required: n,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub val_reward: f64,
    pub is_best: bool,
}

/// Validation points from a run's training log, first maximum marked.
pub fn reward_curve(log_path: &Path) -> Result<Vec<CurvePoint>> {
    let rows = read_train_log(log_path)?;
    let pts: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.val_reward.map(|v| (r.step, v))).collect();
    if pts.is_empty() {
        return Err(invalid(format!("{} has no validation entries", log_path.display())));
    }
    let best = pts
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if p.1 > pts[b].1 { i } else { b });
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, &(step, val_reward))| CurvePoint {
            step,
            val_reward,
            is_best: i == best,
        })
        .collect())
}

pub fn write_curve_csv(path: &Path, pts: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in pts {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(RpoError::from)).collect()
}

/// Line chart of validation reward against step with the best point circled.
pub fn curve_svg(title: &str, pts: &[CurvePoint]) -> String {
    let (w, h, pad) = (640.0, 360.0, 50.0);
    let max_step = pts.iter().map(|p| p.step).max().unwrap_or(1).max(1) as f64;
    let lo = pts.iter().map(|p| p.val_reward).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.val_reward).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 {
        (lo - 0.01, hi + 0.01)
    } else {
        (lo, hi)
    };
    let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / max_step;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let poly: Vec<String> = pts
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.step), y(p.val_reward)))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">step</text>\n\
         <text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">validation reward</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.4}</text>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        w / 2.0,
        xml_escape(title),
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0,
        pad - 4.0,
        y(hi) + 4.0,
        hi,
        pad - 4.0,
        y(lo) + 4.0,
        lo,
        poly.join(" "),
    );
    for p in pts {
        let (cx, cy) = (x(p.step), y(p.val_reward));
        svg.push_str(&format!(
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"steelblue\"/>\n"
        ));
        if p.is_best {
            svg.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"7\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\"/>\n\
                 <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" fill=\"crimson\">best (step {})</text>\n",
                cy - 12.0,
                p.step
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads the training log of `run_dir` and writes `reward_curve.csv` and
/// `<run name>.svg` into `out_dir`; returns both paths.
pub fn export_reward_curve(run_dir: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let pts = reward_curve(&run_dir.join(crate::run::TRAIN_LOG))?;
    let name = run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let csv_path = out_dir.join(crate::run::REWARD_CURVE_CSV);
    write_curve_csv(&csv_path, &pts)?;
    let svg_path = out_dir.join(format!("{name}.svg"));
    std::fs::write(&svg_path, curve_svg(&format!("{name}: validation reward"), &pts))?;
    Ok((csv_path, svg_path))
}
