//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `u64` seed and draws from its
//! own ChaCha stream. Distinct operations sharing a seed use distinct stream
//! ids so their draws never coincide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids, one per stochastic operation.
pub mod stream {
    pub const CSBM_EDGES: u64 = 1;
    pub const CSBM_FEATURES: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const GAUSSIAN_INPUTS: u64 = 5;
    /// HMC chain `c` uses stream `HMC_BASE + c`.
    pub const HMC_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
