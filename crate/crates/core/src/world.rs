//! Procedural subject world.
//!
//! Subjects are sprites (a shape drawn at a fixed intensity with a faint
//! per-subject texture) composited over one of eight background contexts,
//! optionally restyled. Every rendered image carries the ground-truth factor
//! vector that produced it, and [`OracleEmbedder`] recovers those factors
//! from pixels by template matching.

use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RpoError};
use crate::rng::{self, streams, LabRng};

pub const SIDE: usize = 16;
pub const DATA_DIM: usize = SIDE * SIDE;

/// Sprite intensities a subject may take.
pub const PALETTE: [f64; 5] = [0.35, 0.50, 0.65, 0.80, 0.95];
pub const N_CONTEXTS: usize = 8;
/// Background every reference image is photographed on.
pub const REFERENCE_CONTEXT: Context = Context(0);
pub const PIXEL_NOISE: f64 = 0.015;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const COLOR_CODE_WIDTH: f64 = 0.05;

// factor vector layout
const SHAPE_OFF: usize = 0;
const COLOR_OFF: usize = SHAPE_OFF + Shape::ALL.len();
const CONTEXT_OFF: usize = COLOR_OFF + PALETTE.len();
const STYLE_OFF: usize = CONTEXT_OFF + N_CONTEXTS;
const RESIDUAL_OFF: usize = STYLE_OFF + Style::ALL.len();
pub const EMBED_DIM: usize = RESIDUAL_OFF + 1;

/// Embedding returned for an all-zero image: the unit vector on the residual axis.
pub fn reserved_embedding() -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    v[RESIDUAL_OFF] = 1.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The class token naming this shape.
    pub fn class_token(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    fn contains(self, r: usize, c: usize) -> bool {
        let (rf, cf) = (r as f64, c as f64);
        match self {
            Shape::Circle => (rf - 7.5).powi(2) + (cf - 7.5).powi(2) <= 4.6 * 4.6,
            Shape::Square => (3..13).contains(&r) && (3..13).contains(&c),
            Shape::Triangle => {
                if !(3..13).contains(&r) {
                    return false;
                }
                let half = 0.5 + (rf - 3.0) * 0.5;
                (cf - 7.5).abs() <= half
            }
            Shape::Cross => {
                ((3..13).contains(&r) && (6..10).contains(&c)) || ((6..10).contains(&r) && (3..13).contains(&c))
            }
        }
    }

    pub fn mask(self) -> Vec<bool> {
        (0..DATA_DIM).map(|i| self.contains(i / SIDE, i % SIDE)).collect()
    }
}

/// Background scene, `0..N_CONTEXTS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context(pub usize);

impl Context {
    pub fn all() -> impl Iterator<Item = Context> {
        (0..N_CONTEXTS).map(Context)
    }

    pub fn token(self) -> String {
        format!("ctx{}", self.0)
    }

    /// Background intensity at pixel `(r, c)`.
    fn background(self, r: usize, c: usize) -> f64 {
        let (rf, cf) = (r as f64, c as f64);
        let span = (SIDE - 1) as f64;
        match self.0 {
            0 => 0.10,
            1 => 0.30 * cf / span,
            2 => 0.30 * rf / span,
            3 => {
                if (r / 2).is_multiple_of(2) {
                    0.0
                } else {
                    0.25
                }
            }
            4 => {
                if (c / 2).is_multiple_of(2) {
                    0.0
                } else {
                    0.25
                }
            }
            5 => {
                if (r / 2 + c / 2).is_multiple_of(2) {
                    0.0
                } else {
                    0.25
                }
            }
            6 => {
                let d = ((rf - 7.5).powi(2) + (cf - 7.5).powi(2)).sqrt();
                0.30 * d / (7.5f64 * 2f64.sqrt())
            }
            7 => {
                if ((r + c) / 3).is_multiple_of(2) {
                    0.22
                } else {
                    0.02
                }
            }
            _ => unreachable!("context id out of range"),
        }
    }

    pub fn template(self) -> Vec<f64> {
        (0..DATA_DIM).map(|i| self.background(i / SIDE, i % SIDE)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Grayscale inversion, `1 - x`.
    Invert,
    /// Contrast halved around mid-gray.
    Faded,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::Invert, Style::Faded];

    pub fn token(self) -> &'static str {
        match self {
            Style::Invert => "invert",
            Style::Faded => "faded",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Style::Invert => 1.0 - x,
            Style::Faded => 0.5 + 0.5 * (x - 0.5),
        }
    }

    fn undo(self, x: f64) -> f64 {
        match self {
            Style::Invert => 1.0 - x,
            Style::Faded => 0.5 + 2.0 * (x - 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Recontextualization,
    PropertyModification,
    StyleTransfer,
    Accessorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub shape: Shape,
    pub color: f64,
    pub texture_seed: u64,
}

impl SubjectSpec {
    fn color_index(&self) -> usize {
        nearest_palette(self.color)
    }

    fn texture(&self) -> Vec<f64> {
        let mut rng = rng::stream(self.texture_seed, streams::RENDER);
        (0..DATA_DIM)
            .map(|_| 1.0 + TEXTURE_AMPLITUDE * rng.random_range(-1.0..1.0))
            .collect()
    }
}

fn nearest_palette(color: f64) -> usize {
    PALETTE
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - color).abs().total_cmp(&(b.1 - color).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub fn color_token(index: usize) -> String {
    format!("color{index}")
}

/// A structured prompt: one token per slot.
///
/// `subject_token` is either a subject id or a class token. A missing
/// context means "unspecified"; such prompts render on [`REFERENCE_CONTEXT`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub subject_token: String,
    pub color: Option<usize>,
    pub context: Option<Context>,
    pub style: Option<Style>,
    pub kind: PromptKind,
}

pub const NONE_COLOR: &str = "<no-color>";
pub const NONE_CONTEXT: &str = "<no-context>";
pub const NONE_STYLE: &str = "<no-style>";

impl PromptSpec {
    /// "a photo of `token`", no context or style.
    pub fn subject_only(token: impl Into<String>) -> Self {
        Self {
            subject_token: token.into(),
            color: None,
            context: None,
            style: None,
            kind: PromptKind::Recontextualization,
        }
    }

    pub fn in_context(token: impl Into<String>, context: Context) -> Self {
        Self {
            context: Some(context),
            ..Self::subject_only(token)
        }
    }

    /// Canonical four-slot token sequence: subject, color, context, style.
    pub fn tokens(&self) -> [String; 4] {
        [
            self.subject_token.clone(),
            self.color.map(color_token).unwrap_or_else(|| NONE_COLOR.into()),
            self.context.map(Context::token).unwrap_or_else(|| NONE_CONTEXT.into()),
            self.style
                .map(|s| s.token().to_string())
                .unwrap_or_else(|| NONE_STYLE.into()),
        ]
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens().join(" "))
    }
}

/// Token table shared by the world, the embedder and the denoiser's condition table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

/// Condition slots resolved to vocabulary indices.
pub type CondIds = [usize; 4];

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| RpoError::UnknownToken(token.to_string()))
    }

    pub fn encode(&self, prompt: &PromptSpec) -> Result<CondIds> {
        let [a, b, c, d] = prompt.tokens();
        Ok([self.id(&a)?, self.id(&b)?, self.id(&c)?, self.id(&d)?])
    }
}

/// Fully resolved generative factors of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub color: f64,
    pub context: Context,
    pub style: Option<Style>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub pixels: Vec<f64>,
    /// Unit-norm factor vector (see [`factor_vector`]).
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectWorld {
    pub seed: u64,
    pub subjects: Vec<SubjectSpec>,
    pub held_out: String,
    pub vocab: Vocab,
}

/// Builds a world of `n_subjects` sprites; one is held out of pretraining.
pub fn build_world(n_subjects: usize, seed: u64) -> Result<SubjectWorld> {
    let capacity = Shape::ALL.len() * PALETTE.len();
    if n_subjects < 2 {
        return Err(invalid(format!("need at least 2 subjects, got {n_subjects}")));
    }
    if n_subjects > capacity {
        return Err(invalid(format!(
            "{n_subjects} subjects exceed the {capacity} distinct (shape, color) pairs"
        )));
    }
    let mut rng = rng::stream(seed, streams::WORLD);
    // cycle shapes so every class with a held-out member also has corpus members
    let mut palettes: Vec<Vec<usize>> = Shape::ALL
        .iter()
        .map(|_| {
            let mut p: Vec<usize> = (0..PALETTE.len()).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let subjects: Vec<SubjectSpec> = (0..n_subjects)
        .map(|i| {
            let s = i % Shape::ALL.len();
            let color = PALETTE[palettes[s].pop().expect("capacity checked")];
            SubjectSpec {
                subject_id: format!("s{i:02}"),
                shape: Shape::ALL[s],
                color,
                texture_seed: rng.random(),
            }
        })
        .collect();
    let held_out = subjects[0].subject_id.clone();

    let mut tokens: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
    tokens.extend(Shape::ALL.iter().map(|s| s.class_token().to_string()));
    tokens.push(NONE_COLOR.into());
    tokens.extend((0..PALETTE.len()).map(color_token));
    tokens.push(NONE_CONTEXT.into());
    tokens.extend(Context::all().map(Context::token));
    tokens.push(NONE_STYLE.into());
    tokens.extend(Style::ALL.iter().map(|s| s.token().to_string()));

    Ok(SubjectWorld {
        seed,
        subjects,
        held_out,
        vocab: Vocab::new(tokens),
    })
}

impl SubjectWorld {
    pub fn subject(&self, id: &str) -> Result<&SubjectSpec> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| RpoError::UnknownToken(id.to_string()))
    }

    pub fn held_out_subject(&self) -> &SubjectSpec {
        self.subject(&self.held_out).expect("held-out id is a world subject")
    }

    /// Subjects available for pretraining (everything but the held-out one).
    pub fn corpus(&self) -> Vec<&SubjectSpec> {
        self.subjects.iter().filter(|s| s.subject_id != self.held_out).collect()
    }

    /// The eight finetuning prompts for a subject: six re-contextualizations,
    /// one property modification and one style transfer.
    pub fn training_prompts(&self, subject: &SubjectSpec) -> Vec<PromptSpec> {
        let tok = subject.subject_id.as_str();
        let mut prompts: Vec<PromptSpec> = (1..=6).map(|k| PromptSpec::in_context(tok, Context(k))).collect();
        prompts.push(PromptSpec {
            color: Some(property_color(subject)),
            kind: PromptKind::PropertyModification,
            ..PromptSpec::in_context(tok, Context(7))
        });
        prompts.push(PromptSpec {
            style: Some(Style::Invert),
            kind: PromptKind::StyleTransfer,
            ..PromptSpec::in_context(tok, Context(7))
        });
        prompts
    }

    /// Held-out evaluation prompts: every context, one recoloring, one restyling.
    pub fn eval_prompts(&self, subject: &SubjectSpec) -> Vec<PromptSpec> {
        let tok = subject.subject_id.as_str();
        let mut prompts: Vec<PromptSpec> = Context::all().map(|k| PromptSpec::in_context(tok, k)).collect();
        prompts.push(PromptSpec {
            color: Some(property_color(subject)),
            kind: PromptKind::PropertyModification,
            ..PromptSpec::in_context(tok, Context(2))
        });
        prompts.push(PromptSpec {
            style: Some(Style::Faded),
            kind: PromptKind::StyleTransfer,
            ..PromptSpec::in_context(tok, Context(5))
        });
        prompts
    }

    /// The plain subject prompt used for the similarity loss.
    pub fn subject_prompt(&self, subject: &SubjectSpec) -> PromptSpec {
        PromptSpec::subject_only(subject.subject_id.clone())
    }

    /// Resolves a prompt against a subject into concrete factors.
    pub fn scene(&self, subject: &SubjectSpec, prompt: &PromptSpec) -> Result<Scene> {
        let shape = if prompt.subject_token == subject.subject_id || prompt.subject_token == subject.shape.class_token()
        {
            subject.shape
        } else {
            return Err(invalid(format!(
                "prompt token `{}` does not name subject {}",
                prompt.subject_token, subject.subject_id
            )));
        };
        let color = match prompt.color {
            Some(i) if i < PALETTE.len() => PALETTE[i],
            Some(i) => return Err(RpoError::UnknownToken(color_token(i))),
            None => subject.color,
        };
        Ok(Scene {
            shape,
            color,
            context: prompt.context.unwrap_or(REFERENCE_CONTEXT),
            style: prompt.style,
        })
    }

    pub fn render(&self, subject: &SubjectSpec, prompt: &PromptSpec, rng: &mut LabRng) -> Result<RenderedImage> {
        let scene = self.scene(subject, prompt)?;
        Ok(render_scene(subject, &scene, rng))
    }

    /// `n` reference photos of the subject on the reference background.
    pub fn reference_images(&self, subject: &SubjectSpec, n: usize, seed: u64) -> Vec<RenderedImage> {
        let mut rng = rng::stream(seed, streams::REFERENCES);
        let prompt = PromptSpec::in_context(subject.subject_id.clone(), REFERENCE_CONTEXT);
        (0..n)
            .map(|_| self.render(subject, &prompt, &mut rng).expect("own token resolves"))
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = WorldFile {
            seed: self.seed,
            held_out: self.held_out.clone(),
            subjects: self.subjects.clone(),
            training_prompts: self
                .subjects
                .iter()
                .map(|s| (s.subject_id.clone(), self.training_prompts(s)))
                .collect(),
            vocab: self.vocab.tokens.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: WorldFile = serde_json::from_str(&text)?;
        Ok(Self {
            seed: file.seed,
            subjects: file.subjects,
            held_out: file.held_out,
            vocab: Vocab::new(file.vocab),
        })
    }
}

/// On-disk world description.
#[derive(Debug, Serialize, Deserialize)]
struct WorldFile {
    seed: u64,
    held_out: String,
    subjects: Vec<SubjectSpec>,
    training_prompts: Vec<(String, Vec<PromptSpec>)>,
    vocab: Vec<String>,
}

/// A recoloring that lands far from the subject's own color.
fn property_color(subject: &SubjectSpec) -> usize {
    (subject.color_index() + 2) % PALETTE.len()
}

pub fn render_scene(subject: &SubjectSpec, scene: &Scene, rng: &mut LabRng) -> RenderedImage {
    let texture = subject.texture();
    let pixels = (0..DATA_DIM)
        .map(|i| {
            let (r, c) = (i / SIDE, i % SIDE);
            let clean = if scene.shape.contains(r, c) {
                scene.color * texture[i]
            } else {
                scene.context.background(r, c)
            };
            let styled = scene.style.map_or(clean, |s| s.apply(clean));
            (styled + PIXEL_NOISE * rng::normal(rng)).clamp(0.0, 1.0)
        })
        .collect();
    RenderedImage {
        pixels,
        truth: factor_vector(
            Some(scene.shape),
            Some(color_code(scene.color)),
            Some(scene.context),
            scene.style,
        ),
    }
}

/// Soft palette code of an intensity, unit norm.
pub fn color_code(color: f64) -> Vec<f64> {
    let raw: Vec<f64> = PALETTE
        .iter()
        .map(|p| (-(color - p).powi(2) / (2.0 * COLOR_CODE_WIDTH * COLOR_CODE_WIDTH)).exp())
        .collect();
    let n = norm(&raw);
    if n == 0.0 {
        return vec![0.0; PALETTE.len()];
    }
    raw.into_iter().map(|x| x / n).collect()
}

/// shape one-hot ⊕ color code ⊕ context one-hot ⊕ style one-hot ⊕ residual, normalized.
fn factor_vector(
    shape: Option<Shape>,
    color: Option<Vec<f64>>,
    context: Option<Context>,
    style: Option<Style>,
) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    if let Some(s) = shape {
        v[SHAPE_OFF + s.index()] = 1.0;
    }
    if let Some(code) = color {
        v[COLOR_OFF..COLOR_OFF + PALETTE.len()].copy_from_slice(&code);
    }
    if let Some(k) = context {
        v[CONTEXT_OFF + k.0] = 1.0;
    }
    if let Some(st) = style {
        v[STYLE_OFF + st as usize] = 1.0;
    }
    normalize(v)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Fixed template-matching encoder standing in for a pretrained dual encoder.
///
/// Images are explained by every (style, context, shape) hypothesis; the
/// best one fixes the style, soft-min distances give the shape and context
/// blocks, and a confidence term that decays with the unexplained energy
/// moves mass onto the residual axis. Clean renders embed onto their truth
/// vector; noise embeds near the residual axis.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    pub shape_templates: Vec<Vec<bool>>,
    pub context_templates: Vec<Vec<f64>>,
    /// Temperature of the soft assignment across templates.
    pub sharpness: f64,
    /// Scale of the unexplained mean-square error at which confidence drops by `1/e`.
    pub tolerance: f64,
    border: Vec<bool>,
    subjects: HashMap<String, (Shape, usize)>,
    vocab: Vocab,
}

struct Hypothesis {
    fit: f64,
    context_d: Vec<f64>,
    shape_d: Vec<f64>,
    shape_color: Vec<f64>,
}

impl OracleEmbedder {
    pub fn new(world: &SubjectWorld) -> Self {
        let shape_templates: Vec<Vec<bool>> = Shape::ALL.iter().map(|s| s.mask()).collect();
        let border = (0..DATA_DIM).map(|i| shape_templates.iter().all(|m| !m[i])).collect();
        Self {
            shape_templates,
            context_templates: Context::all().map(Context::template).collect(),
            sharpness: 0.002,
            tolerance: 0.02,
            border,
            subjects: world
                .subjects
                .iter()
                .map(|s| (s.subject_id.clone(), (s.shape, s.color_index())))
                .collect(),
            vocab: world.vocab.clone(),
        }
    }

    fn explain(&self, img: &[f64], style: Option<Style>) -> Hypothesis {
        let u: Vec<f64> = img.iter().map(|&x| style.map_or(x, |s| s.undo(x))).collect();
        let n_border = self.border.iter().filter(|b| **b).count() as f64;
        let context_d: Vec<f64> = self
            .context_templates
            .iter()
            .map(|t| {
                u.iter()
                    .zip(t)
                    .zip(&self.border)
                    .filter(|(_, b)| **b)
                    .map(|((x, y), _)| (x - y).powi(2))
                    .sum::<f64>()
                    / n_border
            })
            .collect();
        let best_ctx = argmin(&context_d);
        let bg = &self.context_templates[best_ctx];
        let interior: Vec<usize> = (0..DATA_DIM).filter(|&i| !self.border[i]).collect();
        let mut shape_d = Vec::with_capacity(self.shape_templates.len());
        let mut shape_color = Vec::with_capacity(self.shape_templates.len());
        for mask in &self.shape_templates {
            let inside: Vec<f64> = interior.iter().filter(|&&i| mask[i]).map(|&i| u[i]).collect();
            let c = inside.iter().sum::<f64>() / inside.len() as f64;
            let d = interior
                .iter()
                .map(|&i| {
                    let pred = if mask[i] { c } else { bg[i] };
                    (u[i] - pred).powi(2)
                })
                .sum::<f64>()
                / interior.len() as f64;
            shape_d.push(d);
            shape_color.push(c);
        }
        let best_shape = argmin(&shape_d);
        let fit = (n_border * context_d[best_ctx] + interior.len() as f64 * shape_d[best_shape]) / DATA_DIM as f64;
        Hypothesis {
            fit,
            context_d,
            shape_d,
            shape_color,
        }
    }

    fn confidence(&self, d: f64) -> f64 {
        let noise_floor = PIXEL_NOISE * PIXEL_NOISE;
        (-(d - noise_floor).max(0.0) / self.tolerance).exp()
    }

    fn soft_assign(&self, d: &[f64]) -> Vec<f64> {
        let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|x| (-(x - m) / self.sharpness).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// Image feature extractor.
    pub fn embed_image(&self, img: &[f64]) -> Result<Vec<f64>> {
        if img.len() != DATA_DIM {
            return Err(invalid(format!("image has {} pixels, want {DATA_DIM}", img.len())));
        }
        if img.iter().any(|x| !x.is_finite()) {
            return Err(invalid("image has non-finite pixels"));
        }
        if img.iter().all(|&x| x == 0.0) {
            return Ok(reserved_embedding());
        }
        let styles = [None, Some(Style::Invert), Some(Style::Faded)];
        let hyps: Vec<Hypothesis> = styles.iter().map(|s| self.explain(img, *s)).collect();
        let fits: Vec<f64> = hyps.iter().map(|h| h.fit).collect();
        let style_w = self.soft_assign(&fits);
        let best = &hyps[argmin(&fits)];

        let mut v = vec![0.0; EMBED_DIM];
        let ctx_conf = self.confidence(best.context_d[argmin(&best.context_d)]);
        for (k, w) in self.soft_assign(&best.context_d).iter().enumerate() {
            v[CONTEXT_OFF + k] = ctx_conf * w;
        }
        let best_shape = argmin(&best.shape_d);
        let shape_conf = self.confidence(best.shape_d[best_shape]);
        for (s, w) in self.soft_assign(&best.shape_d).iter().enumerate() {
            v[SHAPE_OFF + s] = shape_conf * w;
        }
        for (j, c) in color_code(best.shape_color[best_shape]).iter().enumerate() {
            v[COLOR_OFF + j] = shape_conf * c;
        }
        let fit_conf = self.confidence(best.fit);
        for (j, st) in Style::ALL.iter().enumerate() {
            v[STYLE_OFF + *st as usize] = fit_conf * style_w[j + 1];
        }
        let explained = norm(&v[..RESIDUAL_OFF]);
        v[RESIDUAL_OFF] = (1.0 - fit_conf) * 3f64.sqrt().max(explained);
        Ok(normalize(v))
    }

    /// Text encoder: the normalized factor vector a prompt describes.
    pub fn embed_text(&self, prompt: &PromptSpec) -> Result<Vec<f64>> {
        self.vocab.encode(prompt)?;
        let (shape, subject_color) = match self.subjects.get(&prompt.subject_token) {
            Some(&(shape, color)) => (shape, Some(color)),
            None => {
                let shape = Shape::ALL
                    .iter()
                    .copied()
                    .find(|s| s.class_token() == prompt.subject_token)
                    .ok_or_else(|| RpoError::UnknownToken(prompt.subject_token.clone()))?;
                (shape, None)
            }
        };
        let color = prompt.color.or(subject_color).map(|i| color_code(PALETTE[i]));
        Ok(factor_vector(Some(shape), color, prompt.context, prompt.style))
    }
}

fn argmin(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Writes an 8-bit binary portable graymap.
pub fn write_pgm(path: &Path, pixels: &[f64]) -> Result<()> {
    if pixels.len() != DATA_DIM {
        return Err(invalid("pgm export expects a 16x16 image"));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{SIDE} {SIDE}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}
