//! Image/text alignment scores, the λ-weighted harmonic reward, and
//! Bradley-Terry preference probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{field, invalid, Result};
use crate::world::{cosine, OracleEmbedder, PromptSpec};

pub const DEFAULT_SCORE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight on image alignment when labelling preference pairs.
    pub lambda_train: f64,
    /// Weight on image alignment when scoring validation samples.
    pub lambda_val: f64,
    pub score_floor: f64,
    /// Divides the reward difference inside the preference probability.
    pub temperature: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_train: 0.0,
            lambda_val: 0.3,
            score_floor: DEFAULT_SCORE_FLOOR,
            temperature: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda_train", self.lambda_train), ("lambda_val", self.lambda_val)] {
            if !(0.0..=1.0).contains(&l) {
                return Err(field(name, format!("must lie in [0, 1], got {l}")));
            }
        }
        if !(self.score_floor > 0.0 && self.score_floor < 1.0) {
            return Err(field("score_floor", "must lie in (0, 1)"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(field("temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub align_i: f64,
    pub align_t: f64,
}

/// Maps a cosine in [-1, 1] to [0, 1].
pub fn cosine_score(a: &[f64], b: &[f64]) -> f64 {
    ((cosine(a, b) + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Mean image-to-reference score for an already embedded sample.
pub fn align_i_embedded(emb: &[f64], ref_embs: &[Vec<f64>]) -> Result<f64> {
    if ref_embs.is_empty() {
        return Err(invalid("reference set is empty"));
    }
    Ok(ref_embs.iter().map(|r| cosine_score(emb, r)).sum::<f64>() / ref_embs.len() as f64)
}

pub fn align_i(x: &[f64], refs: &[Vec<f64>], e: &OracleEmbedder) -> Result<f64> {
    let ref_embs = refs.iter().map(|r| e.embed_image(r)).collect::<Result<Vec<_>>>()?;
    align_i_embedded(&e.embed_image(x)?, &ref_embs)
}

pub fn align_t(x: &[f64], c: &PromptSpec, e: &OracleEmbedder) -> Result<f64> {
    Ok(cosine_score(&e.embed_image(x)?, &e.embed_text(c)?))
}

/// Both scores for one sample, given precomputed reference embeddings.
pub fn score_pair(x: &[f64], c: &PromptSpec, ref_embs: &[Vec<f64>], e: &OracleEmbedder) -> Result<ScorePair> {
    let emb = e.embed_image(x)?;
    Ok(ScorePair {
        align_i: align_i_embedded(&emb, ref_embs)?,
        align_t: cosine_score(&emb, &e.embed_text(c)?),
    })
}

/// `1 / (λ/s_i + (1−λ)/s_t)` with both scores clamped to `[floor, 1]`.
pub fn harmonic_reward_with_floor(s: ScorePair, lambda: f64, floor: f64) -> f64 {
    let si = s.align_i.clamp(floor, 1.0);
    let st = s.align_t.clamp(floor, 1.0);
    if lambda == 0.0 {
        return st;
    }
    if lambda == 1.0 {
        return si;
    }
    1.0 / (lambda / si + (1.0 - lambda) / st)
}

pub fn harmonic_reward(s: ScorePair, lambda: f64) -> f64 {
    harmonic_reward_with_floor(s, lambda, DEFAULT_SCORE_FLOOR)
}

pub fn arithmetic_reward(s: ScorePair, lambda: f64) -> f64 {
    lambda * s.align_i + (1.0 - lambda) * s.align_t
}

/// Logistic function without overflow for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)`, accurate for large |z|.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Probability that the reference is preferred: `e^{r_ref} / (e^{r_ref} + e^{r_gen})`.
pub fn bt_probability(r_ref: f64, r_gen: f64) -> f64 {
    sigmoid(r_ref - r_gen)
}

pub fn bt_probability_tempered(r_ref: f64, r_gen: f64, temperature: f64) -> f64 {
    sigmoid((r_ref - r_gen) / temperature)
}

/// Bernoulli(p) draw; 1 means the reference is preferred.
pub fn sample_label<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u8 {
    u8::from(rng.random::<f64>() < p)
}
