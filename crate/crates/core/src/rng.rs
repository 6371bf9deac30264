//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (RFC 7539 block function, 8 rounds) via
//! `rand_chacha`, which is specified bit-for-bit and platform independent. A
//! run seed selects the key and each [`Purpose`] selects a distinct 64-bit
//! stream id, so drawing more training data never shifts the initialization
//! or the evaluation batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    TrainData = 2,
    EvalData = 3,
    CurvatureData = 4,
    Noise = 5,
    TaskMlp = 6,
    Misc = 7,
}

/// Independent stream for `(seed, purpose)`.
pub fn stream(seed: u64, purpose: Purpose) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
