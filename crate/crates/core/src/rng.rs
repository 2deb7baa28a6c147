//! Per-component random streams derived from one master seed.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(component, index)`, so adding draws in one component never shifts the
//! sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Component {
    Sampler = 1,
    Mixer = 2,
    Generator = 3,
    Init = 4,
    Augment = 5,
    Crop = 6,
    Bench = 7,
}

pub fn stream(master: u64, component: Component, index: u32) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((component as u64) << 32) | index as u64);
    rng
}

/// Seed of the `k`-th run of a multi-seed experiment.
pub fn run_seed(master: u64, k: usize) -> u64 {
    // splitmix64 finalizer; keeps neighbouring masters from sharing runs
    let mut z = master.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
