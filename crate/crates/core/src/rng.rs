//! Deterministic seed derivation.
//!
//! Parallel stages never share a generator. Each unit of work (timepoint,
//! permutation, trial, channel) gets its own ChaCha stream seeded from the
//! master seed and a stream tag, so output is identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Tags separating independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Plan = 1,
    Trial = 2,
    Noise = 3,
    Weights = 4,
    Equalize = 5,
    ConditionBalance = 6,
    IemPartition = 7,
    IemLabels = 8,
    Permutation = 9,
    Timepoint = 10,
    Misc = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a stream tag and a path of indices.
pub fn derive_seed(master: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn rng_for(master: u64, stream: Stream, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, path))
}
