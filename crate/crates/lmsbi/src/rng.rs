//! Project-wide random number generation.
//!
//! A single generator algorithm (ChaCha12) is fixed for the whole project.
//! Parallel batches derive independent streams as (master_seed, index) so
//! results never depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Root generator for a run.
pub fn master_rng(seed: u64) -> Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent stream `index` of the generator seeded by `master_seed`.
pub fn stream_rng(master_seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(index.into());
    rng
}
