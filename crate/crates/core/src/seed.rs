//! Seed derivation. All randomness in the crate flows from explicit `u64`
//! seeds through [`rng`]; sub-streams are derived with [`derive`] so that
//! independent consumers never share a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream id.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.rotate_left(17))
}

/// Stable (FNV-1a) hash of a label, for keying streams by name.
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_label(seed: u64, name: &str) -> u64 {
    derive(seed, label(name))
}
