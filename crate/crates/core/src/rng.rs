use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one purpose (`stream`) under a run seed.
/// Distinct streams never share output, so adding a consumer cannot shift
/// another consumer's draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const DEEPEN: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const HMM: u64 = 5;
    pub const LATTICE: u64 = 6;
    pub const SUBSET: u64 = 7;
    pub const TASK: u64 = 8;
}
