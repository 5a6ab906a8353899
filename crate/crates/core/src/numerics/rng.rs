use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The pipeline-wide deterministic generator.
pub type Generator = ChaCha8Rng;

pub fn generator(seed: u64) -> Generator {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream; the parent advances by one draw.
pub fn split(parent: &mut Generator) -> Generator {
    ChaCha8Rng::seed_from_u64(parent.gen())
}
