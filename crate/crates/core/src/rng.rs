use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable seeded generator; a `stream` separates independent consumers of
/// the same user seed.
pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const IMBALANCE: u64 = 5;
}
