//! Reward preference optimization for subject-driven generation, at desk scale.
//!
//! A procedural sprite world stands in for photographs, a small MLP noise
//! predictor stands in for the diffusion backbone, and a template-matching
//! encoder stands in for the image/text scorer. On top of those sit the
//! λ-harmonic reward, Bradley-Terry preference labels, the similarity and
//! preference losses, and validation-driven early stopping.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod optim;
pub mod reward;
pub mod rng;
pub mod rpo;
pub mod run;
pub mod world;

pub use error::{Result, RpoError};
