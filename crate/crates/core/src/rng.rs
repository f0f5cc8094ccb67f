//! Independent RNG streams derived from a master seed.
//!
//! A stream is keyed by `(master, index, purpose)` and seeded through two
//! rounds of splitmix64, so streams for different purposes never share state
//! and switching one purpose on or off leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is the mixing tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Signatures = 0x5349_474e,
    Session = 0x5345_5353,
    Init = 0x494e_4954,
    Shuffle = 0x5348_5546,
    Ablation = 0x4142_4c41,
    Dropout = 0x4452_4f50,
    EvalMask = 0x4d41_534b,
    Separability = 0x5345_5041,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, index: u64, purpose: Purpose) -> u64 {
    splitmix64(splitmix64(master ^ (purpose as u64).rotate_left(32)) ^ index)
}

pub fn stream(master: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference generator seeded with 0
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            out
        };
        assert_eq!(next(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(next(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn streams_are_distinct() {
        let purposes = [
            Purpose::Signatures,
            Purpose::Session,
            Purpose::Init,
            Purpose::Shuffle,
            Purpose::Ablation,
            Purpose::Dropout,
            Purpose::EvalMask,
            Purpose::Separability,
        ];
        let mut seen = HashSet::new();
        for master in [0, 1, 11] {
            for index in 0..20 {
                for p in purposes {
                    assert!(seen.insert(derive_seed(master, index, p)));
                }
            }
        }
    }

    #[test]
    fn stream_is_reproducible() {
        let a: Vec<u32> = stream(7, 3, Purpose::Shuffle).random_iter().take(8).collect();
        let b: Vec<u32> = stream(7, 3, Purpose::Shuffle).random_iter().take(8).collect();
        assert_eq!(a, b);
    }
}
