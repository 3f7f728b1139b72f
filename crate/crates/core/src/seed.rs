//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The SplitMix64 output function. A bijection on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one sweep cell.
///
/// The grid indices are packed into one word (`lambda_idx` in bits 48..64,
/// `alpha_idx` in bits 32..48, `run` in bits 0..32) before mixing, so distinct
/// cells under the same base seed always get distinct seeds.
pub fn cell_seed(base_seed: u64, lambda_idx: usize, alpha_idx: usize, run: usize) -> u64 {
    debug_assert!(lambda_idx < 1 << 16 && alpha_idx < 1 << 16 && (run as u64) < 1 << 32);
    let packed = ((lambda_idx as u64) << 48) | ((alpha_idx as u64) << 32) | run as u64;
    splitmix64(base_seed.wrapping_add(packed))
}

/// Independent named streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Mrp = 1,
    Features = 2,
    Trajectory = 3,
}

pub fn stream_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ (stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)).wrapping_add(index))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
