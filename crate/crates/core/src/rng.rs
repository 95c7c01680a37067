//! Keyed random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from a tuple
//! of integers, so results never depend on the order in which independent
//! pieces of work run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams of different consumers apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dataset = 2,
    Shuffle = 3,
    Avatar = 4,
    Oracle = 5,
    Dropout = 6,
    Verify = 7,
}

pub fn keyed(stream: Stream, seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&(stream as u64).to_le_bytes());
    key[8..16].copy_from_slice(&seed.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
