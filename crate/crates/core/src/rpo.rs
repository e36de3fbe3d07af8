//! Preference-regularized finetuning of a pretrained denoiser on one subject.
//!
//! Pipeline: sample negatives from the frozen base on the training prompts,
//! pair each with a reference and a Bradley-Terry label, then minimize the
//! similarity loss on the references plus the preference loss on the pairs,
//! validating periodically and keeping the best checkpoint.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::loss::{noise_batch, row_sq_err, squared_error_grad, Example, NoisedBatch};
use crate::diffusion::{
    sample_batch, BaseSnapshot, DenoiserModel, NoisePredictor, NoiseSchedule, SamplerKind, TokenInit,
};
use crate::error::{field, invalid, Result, RpoError};
use crate::optim::{clip_grad_norm, AdamW};
use crate::reward::{
    bt_probability_tempered, harmonic_reward_with_floor, log_sigmoid, sample_label, score_pair, sigmoid, RewardConfig,
    ScorePair,
};
use crate::rng::{self, streams, LabRng};
use crate::world::{CondIds, OracleEmbedder, PromptSpec, RenderedImage, SubjectSpec, SubjectWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Scale of the preference logit.
    pub beta: f64,
    /// Toy-scale default; billion-parameter backbones use about 5e-6.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub max_steps: usize,
    pub validate_every: usize,
    pub n_train_prompts: usize,
    pub n_gen_per_prompt: usize,
    pub n_val_images_per_prompt: usize,
    pub n_references: usize,
    /// Reference images per similarity-loss minibatch (drawn with replacement).
    pub sim_batch: usize,
    /// Preference tuples per preference-loss minibatch.
    pub pref_batch: usize,
    /// Ancestral steps used to sample negatives.
    pub gen_steps: usize,
    /// Deterministic steps used for validation samples.
    pub val_steps: usize,
    pub use_pref_loss: bool,
    pub early_stopping: bool,
    /// Draw labels once instead of once per pass over the tuples.
    pub fixed_labels: bool,
    /// One timestep shared by the reference and generated halves of a tuple.
    pub shared_t: bool,
    pub new_token_init: TokenInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            max_steps: 400,
            validate_every: 40,
            n_train_prompts: 8,
            n_gen_per_prompt: 4,
            n_val_images_per_prompt: 2,
            n_references: 4,
            sim_batch: 4,
            pref_batch: 8,
            gen_steps: 100,
            val_steps: 25,
            use_pref_loss: true,
            early_stopping: true,
            fixed_labels: false,
            shared_t: true,
            new_token_init: TokenInit::ClassToken,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_steps", self.max_steps),
            ("validate_every", self.validate_every),
            ("n_train_prompts", self.n_train_prompts),
            ("n_gen_per_prompt", self.n_gen_per_prompt),
            ("n_val_images_per_prompt", self.n_val_images_per_prompt),
            ("n_references", self.n_references),
            ("sim_batch", self.sim_batch),
            ("pref_batch", self.pref_batch),
            ("gen_steps", self.gen_steps),
            ("val_steps", self.val_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if !self.max_steps.is_multiple_of(self.validate_every) {
            return Err(field(
                "validate_every",
                format!("must divide max_steps ({})", self.max_steps),
            ));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(field("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// One base-model sample together with the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub prompt_index: usize,
    pub prompt: PromptSpec,
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub ref_index: usize,
    pub gen_index: usize,
    pub x_ref: Vec<f64>,
    pub x_gen: Vec<f64>,
    pub prompt: PromptSpec,
    pub cond: CondIds,
    pub scores_ref: ScorePair,
    pub scores_gen: ScorePair,
    pub r_ref: f64,
    pub r_gen: f64,
    /// Probability that the reference is preferred.
    pub p: f64,
    /// 1 when the reference is preferred.
    pub y: u8,
}

impl PreferenceTuple {
    /// The same comparison seen from the other side.
    pub fn swapped(&self) -> Self {
        Self {
            ref_index: self.gen_index,
            gen_index: self.ref_index,
            x_ref: self.x_gen.clone(),
            x_gen: self.x_ref.clone(),
            scores_ref: self.scores_gen,
            scores_gen: self.scores_ref,
            r_ref: self.r_gen,
            r_gen: self.r_ref,
            p: 1.0 - self.p,
            y: 1 - self.y,
            ..self.clone()
        }
    }
}

/// Samples `n_per_prompt` images per prompt from the frozen base, in prompt order.
pub fn generate_negatives(
    base: &BaseSnapshot,
    prompts: &[PromptSpec],
    n_per_prompt: usize,
    s: &NoiseSchedule,
    n_steps: usize,
    rng: &mut LabRng,
) -> Result<Vec<GeneratedImage>> {
    let mut index = Vec::new();
    let mut conds = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let c = base.model().encode(p)?;
        for _ in 0..n_per_prompt {
            index.push(i);
            conds.push(c);
        }
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let x = sample_batch(base, &conds, s, n_steps, SamplerKind::Ancestral, rng)?;
    Ok(index
        .into_iter()
        .zip(x.axis_iter(Axis(0)))
        .map(|(i, row)| GeneratedImage {
            prompt_index: i,
            prompt: prompts[i].clone(),
            pixels: row.to_vec(),
        })
        .collect())
}

/// Pairs every generated image with one uniformly drawn reference and labels the pair.
pub fn build_preference_dataset(
    refs: &[Vec<f64>],
    gens: &[GeneratedImage],
    vocab_model: &DenoiserModel,
    reward: &RewardConfig,
    embedder: &OracleEmbedder,
    rng: &mut LabRng,
) -> Result<Vec<PreferenceTuple>> {
    if refs.is_empty() || gens.is_empty() {
        return Err(invalid("preference dataset needs references and generated images"));
    }
    let ref_embs = refs
        .iter()
        .map(|r| embedder.embed_image(r))
        .collect::<Result<Vec<_>>>()?;
    gens.iter()
        .enumerate()
        .map(|(gi, g)| {
            let ri = rng.random_range(0..refs.len());
            let scores_ref = score_pair(&refs[ri], &g.prompt, &ref_embs, embedder)?;
            let scores_gen = score_pair(&g.pixels, &g.prompt, &ref_embs, embedder)?;
            let r_ref = harmonic_reward_with_floor(scores_ref, reward.lambda_train, reward.score_floor);
            let r_gen = harmonic_reward_with_floor(scores_gen, reward.lambda_train, reward.score_floor);
            let p = bt_probability_tempered(r_ref, r_gen, reward.temperature);
            Ok(PreferenceTuple {
                ref_index: ri,
                gen_index: gi,
                x_ref: refs[ri].clone(),
                x_gen: g.pixels.clone(),
                prompt: g.prompt.clone(),
                cond: vocab_model.encode(&g.prompt)?,
                scores_ref,
                scores_gen,
                r_ref,
                r_gen,
                p,
                y: sample_label(p, rng),
            })
        })
        .collect()
}

/// Redraws every label from its stored probability.
pub fn resample_labels(tuples: &mut [PreferenceTuple], rng: &mut LabRng) {
    for t in tuples {
        t.y = sample_label(t.p, rng);
    }
}

pub fn write_tuple_log(path: &Path, tuples: &[PreferenceTuple]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        ref_index: usize,
        gen_index: usize,
        prompt: [String; 4],
        ref_align_i: f64,
        ref_align_t: f64,
        gen_align_i: f64,
        gen_align_t: f64,
        r_ref: f64,
        r_gen: f64,
        p: f64,
        y: u8,
        #[serde(skip)]
        _m: std::marker::PhantomData<&'a ()>,
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tuples {
        let line = Line {
            ref_index: t.ref_index,
            gen_index: t.gen_index,
            prompt: t.prompt.tokens(),
            ref_align_i: t.scores_ref.align_i,
            ref_align_t: t.scores_ref.align_t,
            gen_align_i: t.scores_gen.align_i,
            gen_align_t: t.scores_gen.align_t,
            r_ref: t.r_ref,
            r_gen: t.r_gen,
            p: t.p,
            y: t.y,
            _m: std::marker::PhantomData,
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Scalar loss and its gradient over the full parameter vector.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Noise drawn for one similarity-loss evaluation.
pub fn draw_sim_noise(
    refs: &[Vec<f64>],
    cond: CondIds,
    batch: usize,
    s: &NoiseSchedule,
    rng: &mut LabRng,
) -> Result<NoisedBatch> {
    if refs.is_empty() || batch == 0 {
        return Err(invalid("similarity loss needs references and a positive batch"));
    }
    let examples: Vec<Example> = (0..batch)
        .map(|_| Example {
            x0: refs[rng.random_range(0..refs.len())].clone(),
            cond,
        })
        .collect();
    Ok(noise_batch(&examples, s, rng))
}

/// Similarity loss for pre-drawn noise: batch mean of ‖ε_θ − ε‖².
pub fn sim_loss_fixed(model: &DenoiserModel, nb: &NoisedBatch) -> Objective {
    let mut grad = vec![0.0; model.n_params()];
    let loss = squared_error_grad(model, nb, 1.0 / nb.t.len() as f64, &mut grad);
    Objective { loss, grad }
}

pub fn sim_loss(
    model: &DenoiserModel,
    refs: &[Vec<f64>],
    prompt: &PromptSpec,
    batch: usize,
    s: &NoiseSchedule,
    rng: &mut LabRng,
) -> Result<Objective> {
    let nb = draw_sim_noise(refs, model.encode(prompt)?, batch, s, rng)?;
    Ok(sim_loss_fixed(model, &nb))
}

/// Noise for a batch of preference tuples: reference rows first, then generated rows.
#[derive(Debug, Clone)]
pub struct PrefNoise {
    pub x_t: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: Vec<usize>,
    pub cond: Vec<CondIds>,
    pub y: Vec<u8>,
}

impl PrefNoise {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn draw_pref_noise(
    batch: &[&PreferenceTuple],
    s: &NoiseSchedule,
    shared_t: bool,
    rng: &mut LabRng,
) -> Result<PrefNoise> {
    if batch.is_empty() {
        return Err(invalid("empty preference batch"));
    }
    let b = batch.len();
    let d = batch[0].x_ref.len();
    let mut x_t = Array2::zeros((2 * b, d));
    let mut eps = Array2::zeros((2 * b, d));
    let mut t = vec![0; 2 * b];
    for (i, tup) in batch.iter().enumerate() {
        let t_ref = rng.random_range(1..=s.horizon());
        let t_gen = if shared_t {
            t_ref
        } else {
            rng.random_range(1..=s.horizon())
        };
        for (row, x0, ti) in [(i, &tup.x_ref, t_ref), (b + i, &tup.x_gen, t_gen)] {
            let e = rng::normal_vec(rng, d);
            let a = s.alpha_bar(ti);
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            for j in 0..d {
                x_t[[row, j]] = sa * x0[j] + sn * e[j];
                eps[[row, j]] = e[j];
            }
            t[row] = ti;
        }
    }
    let cond: Vec<CondIds> = batch.iter().chain(batch.iter()).map(|tup| tup.cond).collect();
    Ok(PrefNoise {
        x_t,
        eps,
        t,
        cond,
        y: batch.iter().map(|tup| tup.y).collect(),
    })
}

/// Per-tuple preference margin: how much more θ improves on base for the
/// reference than for the generated image, in squared-error units.
pub fn inner_l_values<P: NoisePredictor + ?Sized, B: NoisePredictor + ?Sized>(
    model: &P,
    base: &B,
    noise: &PrefNoise,
) -> Vec<f64> {
    let theta = row_sq_err(&model.predict(&noise.x_t, &noise.t, &noise.cond), &noise.eps);
    let base = row_sq_err(&base.predict(&noise.x_t, &noise.t, &noise.cond), &noise.eps);
    let b = noise.len();
    (0..b)
        .map(|i| (base[i] - theta[i]) - (base[b + i] - theta[b + i]))
        .collect()
}

/// Margin for a single tuple at a given timestep and noise pair.
pub fn inner_l<P: NoisePredictor + ?Sized, B: NoisePredictor + ?Sized>(
    model: &P,
    base: &B,
    tuple: &PreferenceTuple,
    t: usize,
    eps_ref: &[f64],
    eps_gen: &[f64],
    s: &NoiseSchedule,
) -> Result<f64> {
    s.check_t(t)?;
    let d = tuple.x_ref.len();
    if eps_ref.len() != d || eps_gen.len() != d || tuple.x_gen.len() != d {
        return Err(invalid("noise and image dimensions differ"));
    }
    let a = s.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut x_t = Array2::zeros((2, d));
    let mut eps = Array2::zeros((2, d));
    for j in 0..d {
        x_t[[0, j]] = sa * tuple.x_ref[j] + sn * eps_ref[j];
        x_t[[1, j]] = sa * tuple.x_gen[j] + sn * eps_gen[j];
        eps[[0, j]] = eps_ref[j];
        eps[[1, j]] = eps_gen[j];
    }
    let noise = PrefNoise {
        x_t,
        eps,
        t: vec![t, t],
        cond: vec![tuple.cond, tuple.cond],
        y: vec![tuple.y],
    };
    Ok(inner_l_values(model, base, &noise)[0])
}

/// Preference loss for pre-drawn noise:
/// mean of `−[y·ln σ(β·ℓ) + (1−y)·ln σ(−β·ℓ)]`.
pub fn pre_loss_fixed(model: &DenoiserModel, base: &BaseSnapshot, noise: &PrefNoise, beta: f64) -> Objective {
    let b = noise.len();
    let (pred, cache) = model.forward_cached(&noise.x_t, &noise.t, &noise.cond);
    let base_pred = base.predict(&noise.x_t, &noise.t, &noise.cond);
    let theta_err = row_sq_err(&pred, &noise.eps);
    let base_err = row_sq_err(&base_pred, &noise.eps);
    let mut loss = 0.0;
    let mut d_out = &pred - &noise.eps;
    for i in 0..b {
        let l = (base_err[i] - theta_err[i]) - (base_err[b + i] - theta_err[b + i]);
        let z = beta * l;
        let y = f64::from(noise.y[i]);
        loss -= y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z);
        // ∂/∂ℓ of the per-tuple loss, averaged over the batch
        let g = beta * (sigmoid(z) - y) / b as f64;
        // ℓ depends on θ through −θ_err_ref + θ_err_gen
        d_out.row_mut(i).mapv_inplace(|v| -2.0 * g * v);
        d_out.row_mut(b + i).mapv_inplace(|v| 2.0 * g * v);
    }
    let mut grad = vec![0.0; model.n_params()];
    model.backward(&cache, &d_out, &mut grad);
    Objective {
        loss: loss / b as f64,
        grad,
    }
}

pub fn pre_loss(
    model: &DenoiserModel,
    base: &BaseSnapshot,
    batch: &[&PreferenceTuple],
    s: &NoiseSchedule,
    beta: f64,
    shared_t: bool,
    rng: &mut LabRng,
) -> Result<Objective> {
    let noise = draw_pref_noise(batch, s, shared_t, rng)?;
    Ok(pre_loss_fixed(model, base, &noise, beta))
}

/// Components of the finetuning objective and the summed gradient.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub sim: f64,
    pub pre: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn total_loss_fixed(
    model: &DenoiserModel,
    base: &BaseSnapshot,
    sim_noise: &NoisedBatch,
    pref_noise: Option<&PrefNoise>,
    beta: f64,
) -> TotalLoss {
    let sim = sim_loss_fixed(model, sim_noise);
    let mut grad = sim.grad;
    let pre = match pref_noise {
        Some(n) => {
            let p = pre_loss_fixed(model, base, n, beta);
            grad.iter_mut().zip(&p.grad).for_each(|(g, q)| *g += q);
            p.loss
        }
        None => 0.0,
    };
    TotalLoss {
        sim: sim.loss,
        pre,
        total: sim.loss + pre,
        grad,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &DenoiserModel,
    base: &BaseSnapshot,
    refs: &[Vec<f64>],
    subject_prompt: &PromptSpec,
    tuples: &[&PreferenceTuple],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<TotalLoss> {
    let sim_noise = draw_sim_noise(refs, model.encode(subject_prompt)?, cfg.sim_batch, s, rng)?;
    let pref_noise = if cfg.use_pref_loss {
        Some(draw_pref_noise(tuples, s, cfg.shared_t, rng)?)
    } else {
        None
    };
    Ok(total_loss_fixed(model, base, &sim_noise, pref_noise.as_ref(), cfg.beta))
}

/// Mean λ-harmonic reward of samples drawn for each validation prompt.
#[allow(clippy::too_many_arguments)]
pub fn validate<P: NoisePredictor + ?Sized>(
    model: &P,
    prompts: &[PromptSpec],
    conds: &[CondIds],
    ref_embs: &[Vec<f64>],
    lambda: f64,
    embedder: &OracleEmbedder,
    s: &NoiseSchedule,
    n_per_prompt: usize,
    n_steps: usize,
    rng: &mut LabRng,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("validation weight must lie in [0, 1]"));
    }
    if prompts.is_empty() || prompts.len() != conds.len() || n_per_prompt == 0 {
        return Err(invalid("validation needs prompts, matching conditions and samples"));
    }
    let rows: Vec<CondIds> = conds
        .iter()
        .flat_map(|c| std::iter::repeat_n(*c, n_per_prompt))
        .collect();
    let x = sample_batch(model, &rows, s, n_steps, SamplerKind::Deterministic, rng)?;
    let mut total = 0.0;
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let sp = score_pair(
            row.as_slice().expect("contiguous"),
            &prompts[i / n_per_prompt],
            ref_embs,
            embedder,
        )?;
        total += harmonic_reward_with_floor(sp, lambda, crate::reward::DEFAULT_SCORE_FLOOR);
    }
    Ok(total / x.nrows() as f64)
}

/// Validation with fixed noise, so scores differ only through the model.
pub struct Validator<'a> {
    pub prompts: Vec<PromptSpec>,
    pub conds: Vec<CondIds>,
    pub ref_embs: Vec<Vec<f64>>,
    pub lambda: f64,
    pub embedder: &'a OracleEmbedder,
    pub schedule: &'a NoiseSchedule,
    pub n_per_prompt: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Validator<'_> {
    pub fn score<P: NoisePredictor + ?Sized>(&self, model: &P) -> Result<f64> {
        validate(
            model,
            &self.prompts,
            &self.conds,
            &self.ref_embs,
            self.lambda,
            self.embedder,
            self.schedule,
            self.n_per_prompt,
            self.n_steps,
            &mut rng::stream(self.seed, streams::VALIDATION),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_sim: f64,
    pub l_pre: f64,
    pub grad_norm: f64,
    pub val_reward: Option<f64>,
}

pub fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    if !path.exists() {
        return Err(RpoError::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(RpoError::from)).collect()
}

/// Result of a finetuning run.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    /// The checkpoint selected for use: the best validated one with early
    /// stopping, otherwise the final one.
    pub model: DenoiserModel,
    pub best_model: DenoiserModel,
    pub final_model: DenoiserModel,
    pub base: BaseSnapshot,
    pub step: usize,
    pub best_step: usize,
    pub best_reward: f64,
    pub validations: Vec<(usize, f64)>,
    pub log: Vec<TrainLogRow>,
    pub negatives: Vec<GeneratedImage>,
    pub tuples: Vec<PreferenceTuple>,
    pub references: Vec<RenderedImage>,
}

impl FinetuneState {
    pub fn final_reward(&self) -> Option<f64> {
        self.validations.last().map(|v| v.1)
    }
}

/// Prepares the model for a new subject: binds its token to the class embedding.
pub fn bind_subject(base: &DenoiserModel, subject: &SubjectSpec, how: TokenInit, seed: u64) -> Result<DenoiserModel> {
    let mut m = base.clone();
    m.init_token(&subject.subject_id, subject.shape.class_token(), how, seed)?;
    Ok(m)
}

/// Full finetuning run for `subject` starting from the pretrained `base`.
#[allow(clippy::too_many_arguments)]
pub fn train_rpo(
    world: &SubjectWorld,
    base: &DenoiserModel,
    subject: &SubjectSpec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    reward: &RewardConfig,
    embedder: &OracleEmbedder,
    seed: u64,
) -> Result<FinetuneState> {
    cfg.validate()?;
    reward.validate()?;
    let mut model = bind_subject(base, subject, cfg.new_token_init, seed)?;
    let snapshot = BaseSnapshot::new(&model);

    let references = world.reference_images(subject, cfg.n_references, seed);
    let refs: Vec<Vec<f64>> = references.iter().map(|r| r.pixels.clone()).collect();
    let ref_embs = refs
        .iter()
        .map(|r| embedder.embed_image(r))
        .collect::<Result<Vec<_>>>()?;
    let prompts: Vec<PromptSpec> = world
        .training_prompts(subject)
        .into_iter()
        .take(cfg.n_train_prompts)
        .collect();
    let subject_prompt = world.subject_prompt(subject);

    let negatives = generate_negatives(
        &snapshot,
        &prompts,
        cfg.n_gen_per_prompt,
        schedule,
        cfg.gen_steps,
        &mut rng::stream(seed, streams::NEGATIVES),
    )?;
    let mut label_rng = rng::stream(seed, streams::LABELS);
    let mut tuples = build_preference_dataset(&refs, &negatives, &model, reward, embedder, &mut label_rng)?;

    let validator = Validator {
        conds: prompts.iter().map(|p| model.encode(p)).collect::<Result<_>>()?,
        prompts: prompts.clone(),
        ref_embs,
        lambda: reward.lambda_val,
        embedder,
        schedule,
        n_per_prompt: cfg.n_val_images_per_prompt,
        n_steps: cfg.val_steps,
        seed,
    };

    let net = model.network_range();
    let mut opt = AdamW::new(net.len(), cfg.learning_rate, cfg.weight_decay);
    let mut rng = rng::stream(seed, streams::TRAIN);
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, DenoiserModel)> = None;

    for step in 1..=cfg.max_steps {
        let batch: Vec<&PreferenceTuple> = if cfg.use_pref_loss {
            let mut idx = Vec::with_capacity(cfg.pref_batch);
            while idx.len() < cfg.pref_batch {
                if cursor == order.len() {
                    if !cfg.fixed_labels && step > 1 {
                        resample_labels(&mut tuples, &mut label_rng);
                    }
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            idx.into_iter().map(|i| &tuples[i]).collect()
        } else {
            Vec::new()
        };
        let mut tl = total_loss(
            &model,
            &snapshot,
            &refs,
            &subject_prompt,
            &batch,
            schedule,
            cfg,
            &mut rng,
        )?;
        if !tl.total.is_finite() {
            return Err(RpoError::NonFiniteLoss { step });
        }
        let g = &mut tl.grad[net.clone()];
        let grad_norm = clip_grad_norm(g, cfg.grad_clip_norm);
        opt.step(&mut model.params_mut()[net.clone()], g);

        let val_reward = if step % cfg.validate_every == 0 {
            let r = validator.score(&model)?;
            validations.push((step, r));
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, step, model.clone()));
            }
            Some(r)
        } else {
            None
        };
        log.push(TrainLogRow {
            step,
            l_sim: tl.sim,
            l_pre: tl.pre,
            grad_norm,
            val_reward,
        });
    }

    let (best_reward, best_step, best_model) = best.expect("at least one validation");
    let final_model = model;
    Ok(FinetuneState {
        model: if cfg.early_stopping {
            best_model.clone()
        } else {
            final_model.clone()
        },
        best_model,
        final_model,
        base: snapshot,
        step: cfg.max_steps,
        best_step,
        best_reward,
        validations,
        log,
        negatives,
        tuples,
        references,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ModelConfig, ScheduleKind};
    use crate::world::{build_world, DATA_DIM};

    struct Fixture {
        world: SubjectWorld,
        schedule: NoiseSchedule,
        model: DenoiserModel,
        embedder: OracleEmbedder,
    }

    fn fixture() -> Fixture {
        let world = build_world(6, 2).unwrap();
        let schedule = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let model = DenoiserModel::new(
            ModelConfig {
                hidden: 24,
                ..Default::default()
            },
            world.vocab.clone(),
            DATA_DIM,
            &schedule,
            1,
        )
        .unwrap();
        let embedder = OracleEmbedder::new(&world);
        Fixture {
            world,
            schedule,
            model,
            embedder,
        }
    }

    fn tuples(f: &Fixture, seed: u64) -> Vec<PreferenceTuple> {
        let subject = f.world.held_out_subject();
        let m = bind_subject(&f.model, subject, TokenInit::ClassToken, 0).unwrap();
        let snap = BaseSnapshot::new(&m);
        let prompts = f.world.training_prompts(subject);
        let gens = generate_negatives(&snap, &prompts, 2, &f.schedule, 5, &mut rng::stream(seed, 1)).unwrap();
        let refs: Vec<Vec<f64>> = f
            .world
            .reference_images(subject, 4, seed)
            .into_iter()
            .map(|r| r.pixels)
            .collect();
        build_preference_dataset(
            &refs,
            &gens,
            &m,
            &RewardConfig::default(),
            &f.embedder,
            &mut rng::stream(seed, 2),
        )
        .unwrap()
    }

    #[test]
    fn negatives_are_tagged_and_reproducible() {
        let f = fixture();
        let subject = f.world.held_out_subject();
        let m = bind_subject(&f.model, subject, TokenInit::ClassToken, 0).unwrap();
        let snap = BaseSnapshot::new(&m);
        let prompts = f.world.training_prompts(subject);
        let a = generate_negatives(&snap, &prompts, 4, &f.schedule, 5, &mut rng::stream(3, 3)).unwrap();
        let b = generate_negatives(&snap, &prompts, 4, &f.schedule, 5, &mut rng::stream(3, 3)).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        assert_eq!(a[5].prompt_index, 1);
        assert!(
            generate_negatives(&snap, &prompts, 0, &f.schedule, 5, &mut rng::stream(3, 3))
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn dataset_shape_and_text_only_rewards() {
        let f = fixture();
        let t = tuples(&f, 0);
        assert_eq!(t.len(), 16);
        for tup in &t {
            assert_eq!(tup.r_ref, tup.scores_ref.align_t.clamp(1e-6, 1.0));
            assert_eq!(tup.r_gen, tup.scores_gen.align_t.clamp(1e-6, 1.0));
            assert!(tup.y <= 1 && (0.0..=1.0).contains(&tup.p));
        }
        let m = f.model.clone();
        assert!(build_preference_dataset(
            &[],
            &[],
            &m,
            &RewardConfig::default(),
            &f.embedder,
            &mut rng::stream(0, 0)
        )
        .is_err());
    }

    #[test]
    fn base_model_has_zero_margin_and_ln2_loss() {
        let f = fixture();
        let t = tuples(&f, 1);
        let subject = f.world.held_out_subject();
        let m = bind_subject(&f.model, subject, TokenInit::ClassToken, 0).unwrap();
        let snap = BaseSnapshot::new(&m);
        let batch: Vec<&PreferenceTuple> = t.iter().collect();
        let mut r = rng::stream(4, 4);
        for beta in [0.1, 1.0, 50.0] {
            let obj = pre_loss(&m, &snap, &batch, &f.schedule, beta, true, &mut r).unwrap();
            assert_eq!(obj.loss, std::f64::consts::LN_2);
        }
        let e1 = rng::normal_vec(&mut r, DATA_DIM);
        let e2 = rng::normal_vec(&mut r, DATA_DIM);
        assert_eq!(inner_l(&m, &snap, &t[0], 7, &e1, &e2, &f.schedule).unwrap(), 0.0);
    }

    #[test]
    fn swapping_sides_and_labels_leaves_loss_unchanged() {
        let f = fixture();
        let t = tuples(&f, 2);
        let subject = f.world.held_out_subject();
        let base = bind_subject(&f.model, subject, TokenInit::ClassToken, 0).unwrap();
        let snap = BaseSnapshot::new(&base);
        let mut m = base.clone();
        let mut r = rng::stream(8, 8);
        for p in &mut m.params_mut()[..500] {
            *p += 0.05 * rng::normal(&mut r);
        }
        let fwd: Vec<&PreferenceTuple> = t.iter().take(4).collect();
        let swapped: Vec<PreferenceTuple> = t.iter().take(4).map(|x| x.swapped()).collect();
        let bwd: Vec<&PreferenceTuple> = swapped.iter().collect();
        let a = pre_loss(&m, &snap, &fwd, &f.schedule, 1.0, true, &mut rng::stream(5, 5)).unwrap();
        // same draws in the same order: t first, then the ref-side noise, then the gen-side noise
        let na = draw_pref_noise(&fwd, &f.schedule, true, &mut rng::stream(5, 5)).unwrap();
        let mut nb = draw_pref_noise(&bwd, &f.schedule, true, &mut rng::stream(5, 5)).unwrap();
        // give the swapped batch the same per-image noise
        let b = fwd.len();
        for i in 0..b {
            nb.x_t.row_mut(i).assign(&na.x_t.row(b + i));
            nb.x_t.row_mut(b + i).assign(&na.x_t.row(i));
            nb.eps.row_mut(i).assign(&na.eps.row(b + i));
            nb.eps.row_mut(b + i).assign(&na.eps.row(i));
        }
        let sb = pre_loss_fixed(&m, &snap, &nb, 1.0);
        assert!((a.loss - sb.loss).abs() < 1e-12, "{} vs {}", a.loss, sb.loss);
    }

    #[test]
    fn vanishing_beta_vanishes_gradient() {
        let f = fixture();
        let t = tuples(&f, 3);
        let subject = f.world.held_out_subject();
        let base = bind_subject(&f.model, subject, TokenInit::ClassToken, 0).unwrap();
        let snap = BaseSnapshot::new(&base);
        let mut m = base.clone();
        m.params_mut()[0] += 0.3;
        let batch: Vec<&PreferenceTuple> = t.iter().take(4).collect();
        let noise = draw_pref_noise(&batch, &f.schedule, true, &mut rng::stream(1, 1)).unwrap();
        let g1 = pre_loss_fixed(&m, &snap, &noise, 1e-3).grad;
        let g2 = pre_loss_fixed(&m, &snap, &noise, 1e-6).grad;
        let n1 = crate::optim::grad_norm(&g1);
        let n2 = crate::optim::grad_norm(&g2);
        assert!(n2 < 2e-3 * n1, "{n1} {n2}");
    }

    #[test]
    fn short_run_logs_validations_and_argmax() {
        let f = fixture();
        let cfg = TrainConfig {
            max_steps: 20,
            validate_every: 5,
            gen_steps: 5,
            val_steps: 5,
            ..Default::default()
        };
        let subject = f.world.held_out_subject();
        let st = train_rpo(
            &f.world,
            &f.model,
            subject,
            &f.schedule,
            &cfg,
            &RewardConfig::default(),
            &f.embedder,
            9,
        )
        .unwrap();
        assert_eq!(st.validations.len(), 4);
        assert_eq!(st.log.len(), 20);
        assert_eq!(st.negatives.len(), 32);
        assert!(st.validations.iter().all(|v| st.best_reward >= v.1));
        let again = train_rpo(
            &f.world,
            &f.model,
            subject,
            &f.schedule,
            &cfg,
            &RewardConfig::default(),
            &f.embedder,
            9,
        )
        .unwrap();
        assert_eq!(st.model.params(), again.model.params());
        let bad = TrainConfig {
            validate_every: 7,
            ..cfg
        };
        assert!(train_rpo(
            &f.world,
            &f.model,
            subject,
            &f.schedule,
            &bad,
            &RewardConfig::default(),
            &f.embedder,
            9
        )
        .is_err());
    }
}
