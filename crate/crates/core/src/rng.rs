//! Deterministic seed expansion. Every random draw in the crate comes from a
//! ChaCha stream keyed by a base seed plus a purpose tag and indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes for derived streams. Keeping them distinct means, for instance,
/// that adding discriminators to a model does not perturb encoder init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batches = 3,
    Adversary = 4,
    Probe = 5,
    Run = 6,
    Classifier = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream tag and two indices.
pub fn derive_seed(base: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ (stream as u64));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn stream_rng(base: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, a, b))
}

/// Seed for run `index` of an experiment with the given base seed.
pub fn run_seed(base: u64, index: usize) -> u64 {
    if index == 0 {
        base
    } else {
        derive_seed(base, Stream::Run, index as u64, 0)
    }
}
