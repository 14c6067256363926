//! Named random streams derived from a single experiment seed.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(master seed, trial)` and selected by `(purpose, index)`. Two streams with
//! different purposes never share state, so swapping the delay model leaves
//! the perturbation draws untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Perturbation,
    Delay,
    InitialPoint,
    Optimizer,
    Check,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Perturbation => 1,
            StreamPurpose::Delay => 2,
            StreamPurpose::InitialPoint => 3,
            StreamPurpose::Optimizer => 4,
            StreamPurpose::Check => 5,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(master_seed: u64, trial: u64, purpose: StreamPurpose, index: u32) -> ChaCha12Rng {
    let key = splitmix64(master_seed ^ splitmix64(trial.wrapping_add(0x5EED)));
    let mut seed = [0u8; 32];
    for (k, chunk) in seed.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(key.wrapping_add(k as u64)).to_le_bytes());
    }
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream((purpose.tag() << 32) | index as u64);
    rng
}
