//! Seed streams.
//!
//! Every stochastic routine takes an explicit `u64` seed. Parallel workers get
//! disjoint streams by XOR-ing a stream index into the master seed, so results
//! never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `master ⊕ stream`.
pub fn derive(master: u64, stream: u64) -> u64 {
    master ^ stream
}

/// Stream id for a two-level fan-out (e.g. table row × trial). The outer index
/// occupies the high 32 bits so the two levels never collide.
pub fn stream2(outer: u64, inner: u64) -> u64 {
    (outer << 32) ^ (inner & 0xffff_ffff)
}
