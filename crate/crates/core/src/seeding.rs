//! Deterministic seed derivation. Every randomized stage draws from a
//! ChaCha stream whose seed is mixed from (master seed, stream label, index),
//! so reruns with the same config/seed are bit-identical and independent
//! stages never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mix a master seed with a stream label and an index into a fresh seed.
pub fn derive(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(stream)) ^ splitmix64(index.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// Seeded RNG for a named stream.
pub fn rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_is_deterministic_and_stream_separated() {
        assert_eq!(derive(7, "env", 0), derive(7, "env", 0));
        assert_ne!(derive(7, "env", 0), derive(7, "env", 1));
        assert_ne!(derive(7, "env", 0), derive(7, "audio", 0));
        assert_ne!(derive(7, "env", 0), derive(8, "env", 0));
    }

    #[test]
    fn rng_streams_replay() {
        let mut a = rng(42, "test", 3);
        let mut b = rng(42, "test", 3);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
