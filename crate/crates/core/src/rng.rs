use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seedable generator used everywhere a run must be reproducible.
pub type GdmRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> GdmRng {
    ChaCha8Rng::seed_from_u64(seed)
}
