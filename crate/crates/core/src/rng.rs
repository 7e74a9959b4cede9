//! Seeded counter-based random streams.
//!
//! Every draw is a pure function of (master seed, stream id, position): the
//! ChaCha block function is keyed by the master seed, the stream id selects the
//! nonce, and the word position is the counter. Streams never share state, so
//! results do not depend on the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keeping streams for different subsystems disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Phantom = 1,
    Noise = 2,
    Init = 3,
    Patches = 4,
    Mixup = 5,
    Attack = 6,
    Batches = 7,
    Test = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a domain and index path into a single stream id.
pub fn stream_id(domain: Domain, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(domain as u64), |acc, &p| {
        splitmix(acc ^ splitmix(p))
    })
}

/// Independent generator for `(seed, domain, path)`, positioned at counter 0.
pub fn stream(seed: u64, domain: Domain, path: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, path));
    rng
}
