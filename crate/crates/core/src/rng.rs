//! Seed derivation. One master seed fans out into independent, named streams
//! so any stage can be replayed without re-running the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One step of the splitmix64 sequence.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `(purpose, index)` of `master`.
pub fn derive(master: u64, purpose: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(purpose as u64)) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    HeadGrowth = 3,
    Augment = 4,
    Exemplars = 5,
    Subsample = 6,
    Verify = 7,
}
