//! Named, position-addressed random streams.
//!
//! Every random draw in training comes from a stream derived from the run
//! seed plus a tag and coordinates (epoch, step, task, ...). Streams never
//! share state, so evaluation work or prefetching cannot perturb training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod tag {
    pub const ORDER: u64 = 0x6f72_6465_72;
    pub const SAMPLE: u64 = 0x7361_6d70_6c65;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const VALIDATION: u64 = 0x7661_6c;
    pub const INIT: u64 = 0x696e_6974;
    pub const SYNTH: u64 = 0x7379_6e74_68;
    pub const SPLIT: u64 = 0x7370_6c69_74;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with an ordered list of coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stable 64-bit digest of a string (FNV-1a), for seeding per-slide streams.
pub fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(1, &[]), derive_seed(2, &[]));
    }
}
