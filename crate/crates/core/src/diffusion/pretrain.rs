//! Pretraining of the base denoiser on the world minus its held-out subject.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{denoising_loss, denoising_loss_value, Example};
use super::model::{DenoiserModel, ModelConfig};
use super::schedule::NoiseSchedule;
use crate::error::{field, invalid, Result, RpoError};
use crate::optim::{clip_grad_norm, AdamW};
use crate::rng::{self, streams, LabRng};
use crate::world::{
    render_scene, Context, PromptKind, PromptSpec, Scene, Style, SubjectSpec, SubjectWorld, DATA_DIM, N_CONTEXTS,
    PALETTE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub log_every: usize,
    pub heldout_size: usize,
    /// Held-out loss must end below this fraction of its initial value.
    pub max_loss_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            learning_rate: 1e-3,
            final_lr_fraction: 0.05,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            log_every: 250,
            heldout_size: 128,
            max_loss_ratio: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
            ("heldout_size", self.heldout_size),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("max_loss_ratio", self.max_loss_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(field("final_lr_fraction", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(field("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: DenoiserModel,
    pub log: Vec<PretrainLogRow>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

/// Draws one captioned corpus image.
///
/// Captions mix subject tokens, class tokens with and without a color
/// token, and randomly drop the context slot so unconditional backgrounds
/// are learned too.
pub fn sample_corpus_example(
    world: &SubjectWorld,
    corpus: &[&SubjectSpec],
    rng: &mut LabRng,
) -> Result<(Vec<f64>, PromptSpec)> {
    let subject = corpus[rng.random_range(0..corpus.len())];
    let own_color = PALETTE
        .iter()
        .position(|p| (p - subject.color).abs() < 1e-9)
        .ok_or_else(|| invalid("subject color is off-palette"))?;
    let context = Context(rng.random_range(0..N_CONTEXTS));
    let style = match rng.random_range(0..10) {
        0 => Some(Style::Invert),
        1 => Some(Style::Faded),
        _ => None,
    };
    let (token, color_slot, color, kind) = if rng.random_bool(0.15) {
        let other = (own_color + rng.random_range(1..PALETTE.len())) % PALETTE.len();
        (
            subject.shape.class_token().to_string(),
            Some(other),
            PALETTE[other],
            PromptKind::PropertyModification,
        )
    } else {
        match rng.random_range(0..4) {
            0 | 1 => (
                subject.subject_id.clone(),
                None,
                subject.color,
                PromptKind::Recontextualization,
            ),
            2 => (
                subject.shape.class_token().to_string(),
                Some(own_color),
                subject.color,
                PromptKind::Recontextualization,
            ),
            _ => (
                subject.shape.class_token().to_string(),
                None,
                subject.color,
                PromptKind::Recontextualization,
            ),
        }
    };
    let scene = Scene {
        shape: subject.shape,
        color,
        context,
        style,
    };
    let img = render_scene(subject, &scene, rng);
    let prompt = PromptSpec {
        subject_token: token,
        color: color_slot,
        context: rng.random_bool(0.85).then_some(context),
        style,
        kind: if style.is_some() {
            PromptKind::StyleTransfer
        } else {
            kind
        },
    };
    world.vocab.encode(&prompt)?;
    Ok((img.pixels, prompt))
}

fn corpus_batch(
    world: &SubjectWorld,
    corpus: &[&SubjectSpec],
    model: &DenoiserModel,
    n: usize,
    rng: &mut LabRng,
) -> Result<Vec<Example>> {
    (0..n)
        .map(|_| {
            let (x0, prompt) = sample_corpus_example(world, corpus, rng)?;
            Ok(Example {
                x0,
                cond: model.encode(&prompt)?,
            })
        })
        .collect()
}

/// Pretrains on every subject except the held-out one.
pub fn pretrain(
    world: &SubjectWorld,
    schedule: &NoiseSchedule,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let corpus = world.corpus();
    pretrain_on(world, &corpus, schedule, model_cfg, cfg, seed)
}

pub fn pretrain_on(
    world: &SubjectWorld,
    corpus: &[&SubjectSpec],
    schedule: &NoiseSchedule,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(invalid("pretraining corpus is empty"));
    }
    if corpus.iter().any(|s| s.subject_id == world.held_out) {
        return Err(invalid("pretraining corpus contains the held-out subject"));
    }
    cfg.validate()?;
    let mut model = DenoiserModel::new(model_cfg.clone(), world.vocab.clone(), DATA_DIM, schedule, seed)?;
    let heldout = corpus_batch(
        world,
        corpus,
        &model,
        cfg.heldout_size,
        &mut rng::stream(seed, streams::HELDOUT),
    )?;
    let eval_heldout = |m: &DenoiserModel| -> Result<f64> {
        denoising_loss_value(m, &heldout, schedule, &mut rng::stream(seed, streams::HELDOUT + 100))
    };

    let mut rng = rng::stream(seed, streams::PRETRAIN);
    let mut opt = AdamW::new(model.n_params(), cfg.learning_rate, cfg.weight_decay);
    let initial = eval_heldout(&model)?;
    let mut log = vec![PretrainLogRow {
        step: 0,
        train_loss: f64::NAN,
        heldout_loss: initial,
    }];
    let mut running = 0.0;
    for step in 1..=cfg.steps {
        let batch = corpus_batch(world, corpus, &model, cfg.batch_size, &mut rng)?;
        let mut lg = denoising_loss(&model, &batch, schedule, &mut rng)?;
        if !lg.loss.is_finite() {
            return Err(RpoError::NonFiniteLoss { step });
        }
        running += lg.loss;
        clip_grad_norm(&mut lg.grad, cfg.grad_clip_norm);
        let progress = (step - 1) as f64 / cfg.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        opt.step(model.params_mut(), &lg.grad);
        if step % cfg.log_every == 0 || step == cfg.steps {
            let n = if step % cfg.log_every == 0 {
                cfg.log_every
            } else {
                step % cfg.log_every
            };
            log.push(PretrainLogRow {
                step,
                train_loss: running / n as f64,
                heldout_loss: eval_heldout(&model)?,
            });
            running = 0.0;
        }
    }
    let final_loss = log.last().map_or(initial, |r| r.heldout_loss);
    // Written so that a NaN loss also counts as not converged.
    let converged = final_loss < cfg.max_loss_ratio * initial;
    if !converged {
        return Err(RpoError::NotConverged {
            final_loss,
            initial_loss: initial,
        });
    }
    Ok(PretrainOutcome {
        model,
        log,
        initial_heldout_loss: initial,
        final_heldout_loss: final_loss,
    })
}

pub fn write_pretrain_log(path: &Path, rows: &[PretrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::world::build_world;

    fn small() -> (ModelConfig, PretrainConfig) {
        (
            ModelConfig {
                hidden: 32,
                ..Default::default()
            },
            PretrainConfig {
                steps: 200,
                batch_size: 8,
                log_every: 50,
                heldout_size: 16,
                max_loss_ratio: 0.97,
                ..Default::default()
            },
        )
    }

    #[test]
    fn corpus_captions_encode() {
        let w = build_world(12, 7).unwrap();
        let corpus = w.corpus();
        let mut r = rng::stream(0, 0);
        for _ in 0..200 {
            let (x, p) = sample_corpus_example(&w, &corpus, &mut r).unwrap();
            assert_eq!(x.len(), DATA_DIM);
            assert!(p.subject_token != w.held_out);
        }
    }

    #[test]
    fn short_pretrain_is_deterministic_and_learns() {
        let w = build_world(6, 1).unwrap();
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let (mc, pc) = small();
        let a = pretrain(&w, &s, &mc, &pc, 3).unwrap();
        let b = pretrain(&w, &s, &mc, &pc, 3).unwrap();
        assert_eq!(a.final_heldout_loss.to_bits(), b.final_heldout_loss.to_bits());
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.final_heldout_loss < a.initial_heldout_loss);
        assert_eq!(a.log.len(), 5);
    }

    #[test]
    fn empty_or_leaky_corpus_is_rejected() {
        let w = build_world(6, 1).unwrap();
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let (mc, pc) = small();
        assert!(pretrain_on(&w, &[], &s, &mc, &pc, 0).is_err());
        let leaky = vec![w.held_out_subject()];
        assert!(pretrain_on(&w, &leaky, &s, &mc, &pc, 0).is_err());
    }

    #[test]
    fn unreachable_threshold_reports_final_loss() {
        let w = build_world(6, 1).unwrap();
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let (mc, mut pc) = small();
        pc.steps = 2;
        pc.max_loss_ratio = 1e-6;
        match pretrain(&w, &s, &mc, &pc, 0) {
            Err(RpoError::NotConverged { final_loss, .. }) => assert!(final_loss.is_finite()),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }
}
