use ndarray::Array2;
use rand::Rng;

use super::model::{DenoiserModel, NoisePredictor};
use super::schedule::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::rng;
use crate::world::CondIds;

/// Scalar loss with its gradient over the full flat parameter vector.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// One clean example: data vector and its encoded condition.
#[derive(Debug, Clone)]
pub struct Example {
    pub x0: Vec<f64>,
    pub cond: CondIds,
}

/// Noised batch drawn for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: Vec<usize>,
    pub cond: Vec<CondIds>,
}

/// Draws `t ~ U{1..T}` and fresh `ε` per example, in example order.
pub fn noise_batch<R: Rng + ?Sized>(batch: &[Example], s: &NoiseSchedule, rng: &mut R) -> NoisedBatch {
    let d = batch.first().map_or(0, |e| e.x0.len());
    let mut x_t = Array2::zeros((batch.len(), d));
    let mut eps = Array2::zeros((batch.len(), d));
    let mut ts = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let t = rng.random_range(1..=s.horizon());
        let e = rng::normal_vec(rng, d);
        let a = s.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for j in 0..d {
            x_t[[i, j]] = sa * ex.x0[j] + sn * e[j];
            eps[[i, j]] = e[j];
        }
        ts.push(t);
    }
    NoisedBatch {
        x_t,
        eps,
        t: ts,
        cond: batch.iter().map(|e| e.cond).collect(),
    }
}

/// Per-row squared error ‖pred − ε‖².
pub fn row_sq_err(pred: &Array2<f64>, eps: &Array2<f64>) -> Vec<f64> {
    pred.rows()
        .into_iter()
        .zip(eps.rows())
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum())
        .collect()
}

/// Denoising objective value for any predictor (ω(t) = 1).
pub fn denoising_loss_value<P: NoisePredictor, R: Rng + ?Sized>(
    p: &P,
    batch: &[Example],
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let nb = noise_batch(batch, s, rng);
    let pred = p.predict(&nb.x_t, &nb.t, &nb.cond);
    Ok(row_sq_err(&pred, &nb.eps).iter().sum::<f64>() / batch.len() as f64)
}

/// Mean over the batch of ‖ε_θ(x_t, c, t) − ε‖², with its gradient.
pub fn denoising_loss<R: Rng + ?Sized>(
    m: &DenoiserModel,
    batch: &[Example],
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let nb = noise_batch(batch, s, rng);
    let mut grad = vec![0.0; m.n_params()];
    let loss = squared_error_grad(m, &nb, 1.0 / batch.len() as f64, &mut grad);
    Ok(LossGrad { loss, grad })
}

/// Returns `scale · Σ_rows ‖ε_θ − ε‖²` and accumulates its gradient.
pub(crate) fn squared_error_grad(m: &DenoiserModel, nb: &NoisedBatch, scale: f64, grad: &mut [f64]) -> f64 {
    let (pred, cache) = m.forward_cached(&nb.x_t, &nb.t, &nb.cond);
    let diff = &pred - &nb.eps;
    let loss = scale * diff.iter().map(|d| d * d).sum::<f64>();
    let d_out = diff.mapv(|d| 2.0 * scale * d);
    m.backward(&cache, &d_out, grad);
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::rng::stream;
    use crate::world::{build_world, PromptSpec, DATA_DIM};

    /// Predicts the exact injected noise, knowing the clean rows.
    struct Oracle {
        x0: Array2<f64>,
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn data_dim(&self) -> usize {
            self.x0.ncols()
        }
        fn predict(&self, x_t: &Array2<f64>, t: &[usize], _c: &[CondIds]) -> Array2<f64> {
            let mut out = x_t.clone();
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let a = self.schedule.alpha_bar(t[i]);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - a.sqrt() * self.x0[[i, j]]) / (1.0 - a).sqrt();
                }
            }
            out
        }
    }

    struct Zero(usize);

    impl NoisePredictor for Zero {
        fn data_dim(&self) -> usize {
            self.0
        }
        fn predict(&self, x_t: &Array2<f64>, _t: &[usize], _c: &[CondIds]) -> Array2<f64> {
            Array2::zeros(x_t.raw_dim())
        }
    }

    fn batch(n: usize) -> Vec<Example> {
        let mut r = stream(9, 9);
        (0..n)
            .map(|_| Example {
                x0: (0..DATA_DIM).map(|_| r.random::<f64>()).collect(),
                cond: [0, 0, 0, 0],
            })
            .collect()
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let b = batch(8);
        let x0 = Array2::from_shape_vec((8, DATA_DIM), b.iter().flat_map(|e| e.x0.clone()).collect()).unwrap();
        let oracle = Oracle {
            x0,
            schedule: s.clone(),
        };
        let loss = denoising_loss_value(&oracle, &b, &s, &mut stream(1, 1)).unwrap();
        assert!(loss < 1e-18, "{loss}");
    }

    #[test]
    fn zero_predictor_loss_is_data_dimension() {
        // Monte-Carlo: E‖ε‖² = D
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let b = batch(1);
        let mut r = stream(2, 2);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| denoising_loss_value(&Zero(DATA_DIM), &b, &s, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - DATA_DIM as f64).abs() < 0.05 * DATA_DIM as f64, "{mean}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        assert!(denoising_loss_value(&Zero(4), &[], &s, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn value_and_gradient_paths_agree() {
        let w = build_world(4, 0).unwrap();
        let m = DenoiserModel::new(
            ModelConfig {
                hidden: 32,
                ..Default::default()
            },
            w.vocab.clone(),
            DATA_DIM,
            &make_schedule(100, ScheduleKind::Cosine).unwrap(),
            3,
        )
        .unwrap();
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let cond = m
            .encode(&PromptSpec::subject_only(w.subjects[1].subject_id.clone()))
            .unwrap();
        let b: Vec<Example> = batch(5).into_iter().map(|e| Example { cond, ..e }).collect();
        let v = denoising_loss_value(&m, &b, &s, &mut stream(4, 4)).unwrap();
        let g = denoising_loss(&m, &b, &s, &mut stream(4, 4)).unwrap();
        assert!((v - g.loss).abs() < 1e-9 * v.abs());
        assert_eq!(g.grad.len(), m.n_params());
    }
}
