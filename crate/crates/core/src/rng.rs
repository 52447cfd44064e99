//! Deterministic seeding. Every stochastic operation takes an explicit
//! 64-bit seed; parallel workers derive independent sub-streams through
//! `split`, which expands `(seed, stream)` into a ChaCha8 key with
//! SplitMix64. Identical seeds give identical streams on any thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn expand_key(seed: u64, stream: u64) -> [u8; 32] {
    let mut state = seed ^ stream.wrapping_mul(GOLDEN);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Root stream for a seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(expand_key(seed, 0))
}

/// Independent sub-stream for a worker/voxel index. `split(seed, 0)` is
/// distinct from `seeded(seed)` only when the index mapping says so; we
/// offset by one so worker 0 never aliases the root stream.
pub fn split(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(expand_key(seed, stream.wrapping_add(1)))
}
