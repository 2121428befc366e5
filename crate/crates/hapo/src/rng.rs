//! Deterministic seed derivation.
//!
//! Every random decision in the toolkit flows from a single experiment seed
//! through `derive_seed`, so runs are reproducible and sub-streams
//! (layout generation, demo scans, episode sampling, parameter init) are
//! statistically independent of each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts keep unrelated consumers of the same base seed decorrelated.
pub mod salt {
    pub const LAYOUT: u64 = 0x4c41_594f_5554_0001;
    pub const EPISODE: u64 = 0x4550_4953_4f44_0002;
    pub const DEMO: u64 = 0x4445_4d4f_5343_0003;
    pub const INIT: u64 = 0x494e_4954_5741_0004;
    pub const CURATE: u64 = 0x4355_5241_5445_0005;
    pub const HOLDOUT: u64 = 0x484f_4c44_4f55_0006;
    pub const COLLECT: u64 = 0x434f_4c4c_4543_0007;
}

/// One round of splitmix64; the standard seed-sequence mixer.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from (base, stream index, salt).
pub fn derive_seed(base: u64, stream: u64, salt: u64) -> u64 {
    let mut state = base ^ salt;
    let a = splitmix64(&mut state);
    state ^= stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let b = splitmix64(&mut state);
    a ^ b
}

/// The toolkit's only generator type: small, fast, seedable, portable.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
