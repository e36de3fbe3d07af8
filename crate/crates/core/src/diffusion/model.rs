//! Conditional MLP noise predictor with hand-written backpropagation.
//!
//! Input row: `x_t ⊕ time features(t) ⊕ e[subject] ⊕ e[color] ⊕ e[context] ⊕ e[style]`,
//! two SiLU hidden layers, linear output `F` of data dimension.
//!
//! With `a = √ᾱ_t`, `b = √(1−ᾱ_t)`, data mean `μ` and spread `σ`, and
//! `u = x_t − a·μ`, the noise estimate is
//!
//! ```text
//! ε̂ = c_skip·u + c_out·F(c_in·u, t, c)
//! c_skip = b / (a²σ² + b²),  c_out = aσ / √(a²σ² + b²),  c_in = 1 / √(a²σ² + b²)
//! ```
//!
//! `c_skip·u` is the best linear guess of ε for Gaussian data, so `F` only
//! supplies the data-dependent residual at unit scale for every t.
//!
//! All weights live in one flat vector so optimizers, clipping and
//! finite-difference probes can treat θ uniformly. The condition table sits at
//! the tail of that vector.

use std::ops::Range;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{field, invalid, Result};
use crate::rng::{self, streams};
use crate::world::{CondIds, PromptSpec, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenInit {
    /// Copy the class token's embedding.
    ClassToken,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    /// Width of one condition-slot embedding.
    pub cond_dim: usize,
    pub new_token_init: TokenInit,
    /// Mean pixel intensity used to center inputs.
    pub data_mean: f64,
    /// Pixel spread used by the input/skip/output scalings.
    pub data_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            time_features: 16,
            cond_dim: 16,
            new_token_init: TokenInit::ClassToken,
            data_mean: 0.25,
            data_std: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(field("time_features", "must be a positive even number"));
        }
        if self.hidden == 0 {
            return Err(field("hidden", "must be positive"));
        }
        if self.cond_dim == 0 {
            return Err(field("cond_dim", "must be positive"));
        }
        if !(self.data_std > 0.0 && self.data_std.is_finite()) {
            return Err(field("data_std", "must be positive and finite"));
        }
        if !self.data_mean.is_finite() {
            return Err(field("data_mean", "must be finite"));
        }
        Ok(())
    }
}

pub const N_SLOTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    data_dim: usize,
    in_dim: usize,
    hidden: usize,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
    cond: Range<usize>,
}

impl Layout {
    fn new(data_dim: usize, cfg: &ModelConfig, n_tokens: usize) -> Self {
        let in_dim = data_dim + cfg.time_features + N_SLOTS * cfg.cond_dim;
        let h = cfg.hidden;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            data_dim,
            in_dim,
            hidden: h,
            w1: take(in_dim * h),
            b1: take(h),
            w2: take(h * h),
            b2: take(h),
            w3: take(h * data_dim),
            b3: take(data_dim),
            cond: take(n_tokens * cfg.cond_dim),
        }
    }

    fn total(&self) -> usize {
        self.cond.end
    }
}

/// Anything that predicts the injected noise for a batch of noised rows.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict(&self, x_t: &Array2<f64>, t: &[usize], cond: &[CondIds]) -> Array2<f64>;
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    cond: Vec<CondIds>,
    /// `c_out` per row.
    out_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    alpha_bar: Vec<f64>,
    layout: Layout,
    params: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl DenoiserModel {
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        data_dim: usize,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(data_dim, &config, vocab.len());
        let mut params = vec![0.0; layout.total()];
        let mut rng = rng::stream(seed, streams::INIT);
        let mut fill = |range: &Range<usize>, scale: f64, params: &mut [f64]| {
            for p in &mut params[range.clone()] {
                *p = scale * rng::normal(&mut rng);
            }
        };
        fill(&layout.w1, (1.0 / layout.in_dim as f64).sqrt(), &mut params);
        fill(&layout.w2, (1.0 / layout.hidden as f64).sqrt(), &mut params);
        fill(&layout.w3, (1.0 / layout.hidden as f64).sqrt(), &mut params);
        fill(&layout.cond, 1.0, &mut params);
        Ok(Self {
            config,
            vocab,
            alpha_bar: schedule.alpha_bars().to_vec(),
            layout,
            params,
        })
    }

    pub fn horizon(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Parameters of the network proper (everything except the condition table).
    pub fn network_range(&self) -> Range<usize> {
        0..self.layout.cond.start
    }

    pub fn encode(&self, prompt: &PromptSpec) -> Result<CondIds> {
        self.vocab.encode(prompt)
    }

    pub fn token_embedding(&self, id: usize) -> &[f64] {
        let d = self.config.cond_dim;
        let start = self.layout.cond.start + id * d;
        &self.params[start..start + d]
    }

    /// Initializes a fresh token's embedding from another token (or randomly).
    pub fn init_token(&mut self, token: &str, from: &str, how: TokenInit, seed: u64) -> Result<()> {
        let d = self.config.cond_dim;
        let dst = self.layout.cond.start + self.vocab.id(token)? * d;
        match how {
            TokenInit::ClassToken => {
                let src = self.layout.cond.start + self.vocab.id(from)? * d;
                self.params.copy_within(src..src + d, dst);
            }
            TokenInit::Random => {
                let mut r = rng::stream(seed, streams::INIT + 100);
                for p in &mut self.params[dst..dst + d] {
                    *p = rng::normal(&mut r);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        data_dim: usize,
        schedule: &NoiseSchedule,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout::new(data_dim, &config, vocab.len());
        if layout.total() != params.len() {
            return Err(invalid(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                layout.total()
            )));
        }
        Ok(Self {
            config,
            vocab,
            alpha_bar: schedule.alpha_bars().to_vec(),
            layout,
            params,
        })
    }

    /// `(a, c_in, c_skip, c_out)` at timestep `t`.
    fn coefficients(&self, t: usize) -> (f64, f64, f64, f64) {
        assert!(t >= 1 && t <= self.horizon(), "timestep {t} out of range");
        let ab = self.alpha_bar[t - 1];
        let (a, b2) = (ab.sqrt(), 1.0 - ab);
        let sd = self.config.data_std;
        let denom = ab * sd * sd + b2;
        (a, 1.0 / denom.sqrt(), b2.sqrt() / denom, a * sd / denom.sqrt())
    }

    fn mat(&self, r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[r.clone()]).expect("layout")
    }

    fn time_features(&self, t: usize, out: &mut [f64]) {
        let half = self.config.time_features / 2;
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let angle = t as f64 * freq;
            out[k] = angle.sin();
            out[half + k] = angle.cos();
        }
    }

    fn build_input(&self, x_t: &Array2<f64>, t: &[usize], cond: &[CondIds]) -> Array2<f64> {
        let l = &self.layout;
        let b = x_t.nrows();
        assert_eq!(x_t.ncols(), l.data_dim, "input width");
        assert!(t.len() == b && cond.len() == b, "batch length mismatch");
        let mut input = Array2::zeros((b, l.in_dim));
        let tf = self.config.time_features;
        let cd = self.config.cond_dim;
        for (i, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("contiguous row");
            let (a, c_in, _, _) = self.coefficients(t[i]);
            for (dst, &x) in row[..l.data_dim].iter_mut().zip(x_t.row(i)) {
                *dst = c_in * (x - a * self.config.data_mean);
            }
            self.time_features(t[i], &mut row[l.data_dim..l.data_dim + tf]);
            for (slot, &id) in cond[i].iter().enumerate() {
                let off = l.data_dim + tf + slot * cd;
                row[off..off + cd].copy_from_slice(self.token_embedding(id));
            }
        }
        input
    }

    /// Forward pass keeping activations for [`Self::backward`].
    pub fn forward_cached(&self, x_t: &Array2<f64>, t: &[usize], cond: &[CondIds]) -> (Array2<f64>, ForwardCache) {
        let l = &self.layout;
        let input = self.build_input(x_t, t, cond);
        let b = input.nrows();
        let affine = |x: &Array2<f64>, w: &Range<usize>, bias: &Range<usize>, rows: usize, cols: usize| {
            let mut z = Array2::zeros((b, cols));
            for mut r in z.axis_iter_mut(Axis(0)) {
                r.as_slice_mut()
                    .expect("contiguous")
                    .copy_from_slice(&self.params[bias.clone()]);
            }
            general_mat_mul(1.0, x, &self.mat(w, rows, cols), 1.0, &mut z);
            z
        };
        let z1 = affine(&input, &l.w1, &l.b1, l.in_dim, l.hidden);
        let a1 = z1.mapv(silu);
        let z2 = affine(&a1, &l.w2, &l.b2, l.hidden, l.hidden);
        let a2 = z2.mapv(silu);
        let mut out = affine(&a2, &l.w3, &l.b3, l.hidden, l.data_dim);
        let mut out_scale = Vec::with_capacity(b);
        for ((mut row, x), &ti) in out.axis_iter_mut(Axis(0)).zip(x_t.axis_iter(Axis(0))).zip(t) {
            let (a, _, c_skip, c_out) = self.coefficients(ti);
            let mu = a * self.config.data_mean;
            row.zip_mut_with(&x, |o, &xv| *o = c_skip * (xv - mu) + c_out * *o);
            out_scale.push(c_out);
        }
        let cache = ForwardCache {
            input,
            z1,
            a1,
            z2,
            a2,
            cond: cond.to_vec(),
            out_scale,
        };
        (out, cache)
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, grad: &mut [f64]) {
        let l = &self.layout;
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        fn grad_mat<'g>(grad: &'g mut [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayViewMut2<'g, f64> {
            ArrayViewMut2::from_shape((rows, cols), &mut grad[r.clone()]).expect("layout")
        }
        let add_bias = |grad: &mut [f64], r: &Range<usize>, d: &Array2<f64>| {
            for (g, v) in grad[r.clone()].iter_mut().zip(d.sum_axis(Axis(0))) {
                *g += v;
            }
        };

        let mut d_net = d_out.clone();
        for (mut row, &c_out) in d_net.axis_iter_mut(Axis(0)).zip(&cache.out_scale) {
            row *= c_out;
        }
        general_mat_mul(
            1.0,
            &cache.a2.t(),
            &d_net,
            1.0,
            &mut grad_mat(grad, &l.w3, l.hidden, l.data_dim),
        );
        add_bias(grad, &l.b3, &d_net);

        let mut dz2 = d_net.dot(&self.mat(&l.w3, l.hidden, l.data_dim).t());
        dz2.zip_mut_with(&cache.z2, |d, &z| *d *= silu_grad(z));
        general_mat_mul(
            1.0,
            &cache.a1.t(),
            &dz2,
            1.0,
            &mut grad_mat(grad, &l.w2, l.hidden, l.hidden),
        );
        add_bias(grad, &l.b2, &dz2);

        let mut dz1 = dz2.dot(&self.mat(&l.w2, l.hidden, l.hidden).t());
        dz1.zip_mut_with(&cache.z1, |d, &z| *d *= silu_grad(z));
        general_mat_mul(
            1.0,
            &cache.input.t(),
            &dz1,
            1.0,
            &mut grad_mat(grad, &l.w1, l.in_dim, l.hidden),
        );
        add_bias(grad, &l.b1, &dz1);

        // condition embeddings: only the embedding columns of ∂L/∂input are needed
        let cond_start = l.data_dim + self.config.time_features;
        let w1 = self.mat(&l.w1, l.in_dim, l.hidden);
        let d_cond = dz1.dot(&w1.slice(s![cond_start.., ..]).t());
        let cd = self.config.cond_dim;
        for (row, ids) in d_cond.axis_iter(Axis(0)).zip(&cache.cond) {
            for (slot, &id) in ids.iter().enumerate() {
                let dst = l.cond.start + id * cd;
                for k in 0..cd {
                    grad[dst + k] += row[slot * cd + k];
                }
            }
        }
    }
}

impl NoisePredictor for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.layout.data_dim
    }

    fn predict(&self, x_t: &Array2<f64>, t: &[usize], cond: &[CondIds]) -> Array2<f64> {
        self.forward_cached(x_t, t, cond).0
    }
}

/// Single-example convenience wrapper: ε̂ = ε_θ(x_t, c, t).
pub fn denoiser_forward(m: &DenoiserModel, x_t: &[f64], c: &PromptSpec, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > m.horizon() {
        return Err(crate::RpoError::TimestepOutOfRange {
            t,
            horizon: m.horizon(),
        });
    }
    if x_t.len() != m.layout.data_dim {
        return Err(invalid("input dimension mismatch"));
    }
    let ids = m.encode(c)?;
    let x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).expect("row");
    Ok(m.predict(&x, &[t], &[ids]).into_raw_vec_and_offset().0)
}

/// Frozen copy of the denoiser taken when finetuning starts.
#[derive(Debug, Clone)]
pub struct BaseSnapshot(Arc<DenoiserModel>);

impl BaseSnapshot {
    pub fn new(model: &DenoiserModel) -> Self {
        Self(Arc::new(model.clone()))
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.0
    }
}

impl NoisePredictor for BaseSnapshot {
    fn data_dim(&self) -> usize {
        self.0.data_dim()
    }

    fn predict(&self, x_t: &Array2<f64>, t: &[usize], cond: &[CondIds]) -> Array2<f64> {
        self.0.predict(x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::world::{build_world, Context, DATA_DIM};

    fn model() -> (DenoiserModel, PromptSpec) {
        let w = build_world(4, 0).unwrap();
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let m = DenoiserModel::new(ModelConfig::default(), w.vocab.clone(), DATA_DIM, &s, 1).unwrap();
        let p = PromptSpec::in_context(w.subjects[1].subject_id.clone(), Context(2));
        (m, p)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let (m, p) = model();
        let x = vec![0.3; DATA_DIM];
        let a = denoiser_forward(&m, &x, &p, 10).unwrap();
        let b = denoiser_forward(&m, &x, &p, 10).unwrap();
        assert_eq!(a.len(), 256);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_unknown_token_and_bad_t() {
        let (m, p) = model();
        let x = vec![0.3; DATA_DIM];
        assert!(denoiser_forward(&m, &x, &PromptSpec::subject_only("zzz"), 3).is_err());
        assert!(denoiser_forward(&m, &x, &p, 0).is_err());
        assert!(denoiser_forward(&m, &x, &p, 101).is_err());
    }

    #[test]
    fn output_is_lipschitz_in_one_parameter() {
        let (m, p) = model();
        let x: Vec<f64> = (0..DATA_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
        let base = denoiser_forward(&m, &x, &p, 33).unwrap();
        let idx = m.layout.w2.start + 1234;
        let mut ratios = Vec::new();
        for delta in [1e-3, 1e-4, 1e-5] {
            let mut m2 = m.clone();
            m2.params_mut()[idx] += delta;
            let out = denoiser_forward(&m2, &x, &p, 33).unwrap();
            let change: f64 = out.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            ratios.push(change / delta);
        }
        // O(δ): the change per unit δ converges to a finite directional derivative
        assert!(ratios[2] > 0.0);
        assert!((ratios[1] - ratios[2]).abs() < 1e-3 * ratios[2].max(1e-12));
        assert!((ratios[0] - ratios[2]).abs() < 1e-2 * ratios[2].max(1e-12));
    }

    #[test]
    fn class_token_init_copies_embedding() {
        let (mut m, _) = model();
        let w = build_world(4, 0).unwrap();
        let v = w.held_out.clone();
        let class = w.held_out_subject().shape.class_token();
        m.init_token(&v, class, TokenInit::ClassToken, 0).unwrap();
        assert_eq!(
            m.token_embedding(m.vocab.id(&v).unwrap()),
            m.token_embedding(m.vocab.id(class).unwrap())
        );
    }
}
