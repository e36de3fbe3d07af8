//! Fixtures shared by the gradient and acceptance suites.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rpo_core::diffusion::loss::{noise_batch, NoisedBatch};
use rpo_core::diffusion::{
    denoising_loss, make_schedule, BaseSnapshot, DenoiserModel, Example, ModelConfig, NoiseSchedule, ScheduleKind,
};
use rpo_core::rng::{normal, stream, LabRng};
use rpo_core::rpo::{pre_loss_fixed, sim_loss_fixed, total_loss_fixed, PrefNoise};
use rpo_core::world::{build_world, PromptSpec, SubjectWorld, DATA_DIM};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
/// Keeps the relative error meaningful for gradient entries near zero.
pub const DENOM_FLOOR: f64 = 1e-6;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const SLICES: usize = 10;
pub const SLICE_LEN: usize = 4;

pub struct Fixture {
    pub world: SubjectWorld,
    pub schedule: NoiseSchedule,
    pub model: DenoiserModel,
    pub base: BaseSnapshot,
}

/// Full-width model whose parameters are jittered away from the base, so the
/// preference margin is non-zero.
pub fn fixture(seed: u64) -> Fixture {
    let world = build_world(6, seed).unwrap();
    let schedule = make_schedule(100, ScheduleKind::Cosine).unwrap();
    let base_model =
        DenoiserModel::new(ModelConfig::default(), world.vocab.clone(), DATA_DIM, &schedule, seed).unwrap();
    let mut model = base_model.clone();
    let mut r = stream(seed, 900);
    for p in model.params_mut() {
        *p += 0.02 * normal(&mut r);
    }
    Fixture {
        base: BaseSnapshot::new(&base_model),
        world,
        schedule,
        model,
    }
}

pub fn random_images(n: usize, r: &mut LabRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..DATA_DIM).map(|_| r.random::<f64>()).collect())
        .collect()
}

pub fn sim_noise(f: &Fixture, seed: u64) -> NoisedBatch {
    let mut r = stream(seed, 901);
    let subject = &f.world.subjects[1];
    let cond = f
        .model
        .encode(&PromptSpec::subject_only(subject.subject_id.clone()))
        .unwrap();
    let examples: Vec<Example> = random_images(3, &mut r)
        .into_iter()
        .map(|x0| Example { x0, cond })
        .collect();
    noise_batch(&examples, &f.schedule, &mut r)
}

pub fn pref_noise(f: &Fixture, seed: u64) -> PrefNoise {
    let mut r = stream(seed, 902);
    let b = 4;
    let subject = &f.world.subjects[0];
    let refs = random_images(b, &mut r);
    let gens = random_images(b, &mut r);
    let mut x_t = Array2::zeros((2 * b, DATA_DIM));
    let mut eps = Array2::zeros((2 * b, DATA_DIM));
    let mut t = vec![0; 2 * b];
    for i in 0..b {
        let ti = r.random_range(1..=f.schedule.horizon());
        let a = f.schedule.alpha_bar(ti);
        for (row, x0) in [(i, &refs[i]), (b + i, &gens[i])] {
            for j in 0..DATA_DIM {
                let e = normal(&mut r);
                eps[[row, j]] = e;
                x_t[[row, j]] = a.sqrt() * x0[j] + (1.0 - a).sqrt() * e;
            }
            t[row] = ti;
        }
    }
    let cond = f
        .model
        .encode(&PromptSpec::subject_only(subject.subject_id.clone()))
        .unwrap();
    PrefNoise {
        x_t,
        eps,
        t,
        cond: vec![cond; 2 * b],
        y: (0..b).map(|i| (i % 2) as u8).collect(),
    }
}

/// Random parameter indices: `SLICES` contiguous runs at random offsets.
pub fn slices(n_params: usize, seed: u64) -> Vec<usize> {
    let mut r = stream(seed, 903);
    (0..SLICES)
        .flat_map(|_| {
            let start = r.random_range(0..n_params - SLICE_LEN);
            start..start + SLICE_LEN
        })
        .collect()
}

/// Largest relative error between the analytic gradient and central differences.
pub fn worst_rel_err(model: &DenoiserModel, grad: &[f64], idx: &[usize], loss: impl Fn(&DenoiserModel) -> f64) -> f64 {
    let informative = idx.iter().filter(|&&i| grad[i].abs() > DENOM_FLOOR).count();
    assert!(
        2 * informative >= idx.len(),
        "only {informative} of {} probed entries are non-negligible",
        idx.len()
    );
    let mut m = model.clone();
    idx.iter()
        .map(|&i| {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + H;
            let up = loss(&m);
            m.params_mut()[i] = orig - H;
            let down = loss(&m);
            m.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(DENOM_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of each loss gradient for one seed, at β 0.05 and 1
/// for the preference terms.
pub fn gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let f = fixture(seed);
    let n = f.model.n_params();
    let mut out = Vec::new();
    let mut r = stream(seed, 904);
    let cond = f
        .model
        .encode(&PromptSpec::subject_only(f.world.subjects[2].subject_id.clone()))
        .unwrap();
    let batch: Vec<Example> = random_images(3, &mut r)
        .into_iter()
        .map(|x0| Example { x0, cond })
        .collect();
    let analytic = denoising_loss(&f.model, &batch, &f.schedule, &mut stream(seed, 905)).unwrap();
    let err = worst_rel_err(&f.model, &analytic.grad, &slices(n, seed), |m| {
        denoising_loss(m, &batch, &f.schedule, &mut stream(seed, 905))
            .unwrap()
            .loss
    });
    out.push(("denoising_loss".to_string(), err));
    let nb = sim_noise(&f, seed);
    let analytic = sim_loss_fixed(&f.model, &nb);
    out.push((
        "sim_loss".to_string(),
        worst_rel_err(&f.model, &analytic.grad, &slices(n, seed + 10), |m| {
            sim_loss_fixed(m, &nb).loss
        }),
    ));
    let noise = pref_noise(&f, seed);
    for beta in [0.05, 1.0] {
        let analytic = pre_loss_fixed(&f.model, &f.base, &noise, beta);
        let err = worst_rel_err(&f.model, &analytic.grad, &slices(n, seed + 20), |m| {
            pre_loss_fixed(m, &f.base, &noise, beta).loss
        });
        out.push((format!("pre_loss beta {beta}"), err));
        let analytic = total_loss_fixed(&f.model, &f.base, &nb, Some(&noise), beta);
        let err = worst_rel_err(&f.model, &analytic.grad, &slices(n, seed + 30), |m| {
            total_loss_fixed(m, &f.base, &nb, Some(&noise), beta).total
        });
        out.push((format!("total_loss beta {beta}"), err));
    }
    out
}
