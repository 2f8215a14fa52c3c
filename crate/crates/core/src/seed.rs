//! Labeled seed derivation.
//!
//! Every random stream in a run is derived from one root seed plus a purpose
//! label and integer coordinates (round, client id, sample index). Streams
//! never depend on the order in which they are requested, so client updates
//! can run in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    ClientSampling = 2,
    ClientTraining = 3,
    Shuffle = 4,
    Noise = 5,
    Evaluation = 6,
    Data = 7,
    Partition = 8,
    McSample = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root`, a purpose, and coordinates.
pub fn derive(root: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ (purpose as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xE703_7ED1_A0B4_28DB)));
    }
    h
}

/// A ChaCha stream seeded from a derived seed.
pub fn stream(root: u64, purpose: Purpose, coords: &[u64]) -> Stream {
    Stream::seed_from_u64(derive(root, purpose, coords))
}
