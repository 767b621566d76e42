//! Seeded random streams.
//!
//! Every run derives its generators from a single seed. Components get their
//! own ChaCha stream so that changing how many numbers one component draws
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream ids for the components of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Sampler = 1,
    Trainer = 2,
    Selection = 3,
    Eval = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    sub_stream_rng(seed, stream, 0)
}

/// Stream for one of several instances of the same component (e.g. layer `index`).
pub fn sub_stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index);
    rng
}
