//! Seed derivation and disjoint generator streams.
//!
//! Every generated set carries a 64-bit seed whose top two bits name the stream it
//! was drawn from, so training, validation and evaluation seeds can never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

const STREAM_SHIFT: u32 = 62;
const LOW_MASK: u64 = (1u64 << STREAM_SHIFT) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Train,
    Validation,
    Evaluation,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Train => 0,
            Stream::Validation => 1,
            Stream::Evaluation => 2,
        }
    }

    /// Stream a seed belongs to, if it was produced by [`stream_seed`].
    pub fn of(seed: u64) -> Option<Stream> {
        match seed >> STREAM_SHIFT {
            0 => Some(Stream::Train),
            1 => Some(Stream::Validation),
            2 => Some(Stream::Evaluation),
            _ => None,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    mix64(mix64(parent) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Seed for item `index` of `stream` under `base`; the stream occupies the top bits.
pub fn stream_seed(stream: Stream, base: u64, index: u64) -> u64 {
    (stream.tag() << STREAM_SHIFT) | (derive(base ^ stream.tag(), index) & LOW_MASK)
}

/// Child seed that keeps the stream tag of `parent`.
pub fn child(parent: u64, index: u64) -> u64 {
    (parent & !LOW_MASK) | (derive(parent, index) & LOW_MASK)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_disjoint() {
        for i in 0..1000 {
            assert_eq!(Stream::of(stream_seed(Stream::Train, 7, i)), Some(Stream::Train));
            assert_eq!(
                Stream::of(stream_seed(Stream::Validation, 7, i)),
                Some(Stream::Validation)
            );
            assert_eq!(
                Stream::of(stream_seed(Stream::Evaluation, 7, i)),
                Some(Stream::Evaluation)
            );
        }
    }

    #[test]
    fn child_keeps_stream() {
        let parent = stream_seed(Stream::Evaluation, 3, 11);
        for i in 0..100 {
            assert_eq!(Stream::of(child(parent, i)), Some(Stream::Evaluation));
        }
    }

    #[test]
    fn derive_is_deterministic_and_spread() {
        assert_eq!(derive(1, 2), derive(1, 2));
        assert_ne!(derive(1, 2), derive(1, 3));
        assert_ne!(derive(1, 2), derive(2, 2));
    }
}
