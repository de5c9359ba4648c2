//! Counter-based random streams.
//!
//! Monte Carlo draw `i` always uses stream `i` of a ChaCha8 generator keyed by
//! the caller's seed, so results do not depend on how draws are scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` under `seed`.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a fresh key from `rng` for deriving substreams.
pub fn fork_seed(rng: &mut impl RngCore) -> u64 {
    rng.next_u64()
}
