//! Counter-keyed random streams.
//!
//! Every stochastic choice in the pipeline draws from a generator keyed by a
//! small tuple of integers (seed, sample id, epoch, ...), so results never
//! depend on call order or thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream domains, so that e.g. mask and crop draws for the same sample differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Scene = 1,
    Labels = 2,
    Mask = 3,
    Shuffle = 4,
    Views = 5,
    Crop = 6,
    DropPath = 7,
    Init = 8,
    Gradcheck = 9,
}

pub fn keyed_rng(domain: Domain, key: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let mut acc = splitmix64(domain as u64);
    for (i, &k) in key.iter().enumerate() {
        acc = splitmix64(acc ^ splitmix64(k.wrapping_add(i as u64)));
    }
    for (i, chunk) in seed.chunks_mut(8).enumerate() {
        acc = splitmix64(acc.wrapping_add(i as u64));
        chunk.copy_from_slice(&acc.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
