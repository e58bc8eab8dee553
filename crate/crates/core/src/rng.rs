//! All randomness derives from a single `u64` seed. Independent streams of the
//! same seed feed parallel work (folds, batches) without correlation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
