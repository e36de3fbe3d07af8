use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::rng::{self, LabRng};
use crate::world::CondIds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic reverse process over the (possibly respaced) timesteps.
    Ancestral,
    /// Noise-free update through the predicted clean sample.
    Deterministic,
}

/// `n_steps` timesteps spread over `1..=T`, ascending.
pub fn respaced_timesteps(horizon: usize, n_steps: usize) -> Vec<usize> {
    (1..=n_steps).map(|i| (i * horizon).div_ceil(n_steps)).collect()
}

/// Draws one sample per condition row. Pixels are clamped to `[0, 1]` only
/// after the final step.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    p: &P,
    cond: &[CondIds],
    s: &NoiseSchedule,
    n_steps: usize,
    kind: SamplerKind,
    rng: &mut LabRng,
) -> Result<Array2<f64>> {
    if n_steps == 0 || n_steps > s.horizon() {
        return Err(invalid(format!(
            "n_steps must lie in 1..={}, got {n_steps}",
            s.horizon()
        )));
    }
    let (b, d) = (cond.len(), p.data_dim());
    let mut x = Array2::zeros((b, d));
    x.iter_mut().for_each(|v| *v = rng::normal(rng));
    let steps = respaced_timesteps(s.horizon(), n_steps);
    for (i, &t) in steps.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { steps[i - 1] };
        let (a_t, a_prev) = (s.alpha_bar(t), s.alpha_bar(prev));
        let eps_hat = p.predict(&x, &vec![t; b], cond);
        match kind {
            SamplerKind::Deterministic => {
                let (sa, sn) = (a_t.sqrt(), (1.0 - a_t).sqrt());
                let (spa, spn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
                x.zip_mut_with(&eps_hat, |xv, &e| {
                    let x0 = (*xv - sn * e) / sa;
                    *xv = spa * x0 + spn * e;
                });
            }
            SamplerKind::Ancestral => {
                let alpha = a_t / a_prev;
                let beta = 1.0 - alpha;
                let coef = beta / (1.0 - a_t).sqrt();
                let inv = 1.0 / alpha.sqrt();
                x.zip_mut_with(&eps_hat, |xv, &e| *xv = inv * (*xv - coef * e));
                if prev > 0 {
                    let sigma = (beta * (1.0 - a_prev) / (1.0 - a_t)).sqrt();
                    x.iter_mut().for_each(|v| *v += sigma * rng::normal(rng));
                }
            }
        }
    }
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(x)
}
