use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RpoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Lower clamp applied to every cumulative signal coefficient.
pub const MIN_ALPHA_BAR: f64 = 1e-5;

/// Cumulative signal coefficients ᾱ_t for t = 1..=T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

/// Squared-cosine closed form:
/// `ᾱ(t) = cos²(π/2 · (t/T + s)/(1 + s)) / cos²(π/2 · s/(1 + s))`, with
/// `s = COSINE_OFFSET`, clamped to `[MIN_ALPHA_BAR, 1)`.
pub fn cosine_alpha_bar(t: usize, horizon: usize) -> f64 {
    let f = |tau: f64| {
        let a = std::f64::consts::FRAC_PI_2 * (tau + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        a.cos().powi(2)
    };
    (f(t as f64 / horizon as f64) / f(0.0)).clamp(MIN_ALPHA_BAR, 1.0 - 1e-12)
}

pub fn make_schedule(horizon: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if horizon < 2 {
        return Err(invalid(format!("schedule horizon must be at least 2, got {horizon}")));
    }
    let alpha_bar = match kind {
        ScheduleKind::Cosine => (1..=horizon).map(|t| cosine_alpha_bar(t, horizon)).collect(),
        ScheduleKind::Linear => {
            // betas spanning [1e-4, 0.02] at T = 1000, rescaled to the horizon
            let scale = 1000.0 / horizon as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            let mut acc = 1.0;
            (1..=horizon)
                .map(|t| {
                    let frac = (t - 1) as f64 / (horizon - 1) as f64;
                    let beta = (lo + (hi - lo) * frac).min(0.999);
                    acc *= 1.0 - beta;
                    acc.max(MIN_ALPHA_BAR)
                })
                .collect()
        }
    };
    Ok(NoiseSchedule { kind, alpha_bar })
}

impl NoiseSchedule {
    pub fn horizon(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(RpoError::TimestepOutOfRange {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }

    /// ᾱ_t, 1-indexed; `alpha_bar(0)` is 1 (clean data).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub(crate) fn from_raw(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Self {
        Self { kind, alpha_bar }
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(invalid("x0 and noise differ in dimension"));
    }
    let a = s.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
}

/// Inverts [`forward_noise`] for the noise given the clean sample.
pub fn recover_noise(x_t: &[f64], x0: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check_t(t)?;
    let a = s.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_t.iter().zip(x0).map(|(xt, x)| (xt - sa * x) / sn).collect())
}
