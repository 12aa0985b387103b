//! Per-purpose random streams derived from a run seed.
//!
//! Every stream is a pure function of `(seed, step, purpose)`, so a run that
//! is stopped and resumed at step `s` draws exactly what an uninterrupted run
//! would have drawn, and objectives that skip a purpose never shift the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Scheduler = 3,
    Batching = 4,
    Sampling = 5,
    Perturbation = 6,
    Data = 7,
}

pub fn stream(seed: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 4) | purpose as u64);
    rng
}
