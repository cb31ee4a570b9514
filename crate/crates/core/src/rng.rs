//! Reproducible random streams.
//!
//! Every experiment consumes one master seed. Independent per-block streams
//! are derived by hashing the master seed together with a list of tags
//! (grid point, block index, purpose), so blocks can be simulated in any
//! order or in parallel with bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for all simulations.
pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from a master seed and a tag path.
pub fn derive_rng(master: u64, tags: &[u64]) -> SimRng {
    let mut state = splitmix64(master);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(0xA5A5_A5A5)));
    }
    SimRng::seed_from_u64(state)
}

/// Stream tags for the different random consumers of one block.
pub mod tag {
    pub const CHANNEL: u64 = 1;
    pub const SYMBOLS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PILOTS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SNR: u64 = 6;
    pub const TRAIN: u64 = 7;
}
