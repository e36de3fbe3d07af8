//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream addressed by
//! `(seed, stream id)`, so reordering one subsystem never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const RENDER: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const HELDOUT: u64 = 5;
    pub const NEGATIVES: u64 = 6;
    pub const LABELS: u64 = 7;
    pub const TRAIN: u64 = 8;
    pub const VALIDATION: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const REFERENCES: u64 = 11;
}

pub fn stream(seed: u64, stream_id: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// A reproducible standard-normal vector, addressable by `(seed, stream, counter)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDraw {
    pub eps: Vec<f64>,
    pub stream_id: u64,
    pub counter: u64,
}

impl GaussianDraw {
    pub fn new(seed: u64, stream_id: u64, counter: u64, dim: usize) -> Self {
        let mut rng = stream(seed, stream_id);
        // each counter owns a disjoint block of the keystream
        rng.set_word_pos(u128::from(counter) << 32);
        Self {
            eps: normal_vec(&mut rng, dim),
            stream_id,
            counter,
        }
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
