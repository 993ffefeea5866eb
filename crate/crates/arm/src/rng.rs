//! Seeded random-number streams.
//!
//! Every stochastic operation in the library consumes an explicit handle, so a
//! single run seed fully determines training. Sub-streams are derived from the
//! run seed plus context tags (step index, sample slot, ...) and are therefore
//! independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags keep the derived sub-streams of one run seed disjoint.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const DROP_MASK: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DATA: u64 = 5;
}

pub fn seed_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a list of context tags.
pub fn derive_rng(seed: u64, tags: &[u64]) -> Rng {
    let mut state = splitmix(seed ^ 0x6A09_E667_F3BC_C908);
    for &t in tags {
        state = splitmix(state ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
