//! Counter-derived random streams.
//!
//! Every random decision in a run is drawn from a stream keyed by
//! `(seed, purpose, a, b)`, so changing one consumer (crop counts, batch
//! size) never shifts the draws seen by another, and resuming at step `t`
//! needs nothing but the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Negatives = 4,
    Probe = 5,
    Data = 6,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> Rng {
    let mut state = seed;
    let mut mix = splitmix64(&mut state);
    for word in [purpose as u64, a, b] {
        state ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        mix ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).wrapping_add(mix).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
