//! Counter-based splitting of one root seed into independent ChaCha streams.
//!
//! Every random quantity is drawn from a stream addressed by
//! `(seed, purpose, counter)`, so results never depend on the order in
//! which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Pairs = 1,
    Elbo = 2,
    InitialElbo = 3,
    ProbeWarmup = 4,
    ProbeMoments = 5,
    ProbeOuter = 6,
    Checks = 7,
}

/// Generator for `(seed, purpose, counter)`; counters up to 2^48 stay distinct.
pub fn stream(seed: u64, purpose: Purpose, counter: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (counter & ((1 << 48) - 1)));
    rng
}
