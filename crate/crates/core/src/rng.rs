//! Seed derivation for reproducible, schedule-independent random streams.
//!
//! Every stochastic step draws from a stream seeded by a hash of a base seed
//! and the coordinates of the work item (record index, sample index, cell
//! key, ...). Work can then be split across threads in any way without
//! changing a single draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `parts` into `base`. Order matters: `derive(s, &[1, 2]) != derive(s, &[2, 1])`.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Hash a string label into a seed component.
pub fn label(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(base: u64, parts: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(base, parts))
}
