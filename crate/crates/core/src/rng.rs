//! Deterministic random streams.
//!
//! Every stochastic consumer draws from its own ChaCha8 stream derived from
//! the run seed and a fixed stream name, so adding draws in one consumer never
//! shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named streams. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Reinit = 3,
    Eval = 4,
    Ewc = 5,
    Probe = 6,
    Data = 7,
    FixedLatents = 8,
    Embedding = 9,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
