//! Deterministic derivation of independent RNG streams.
//!
//! Every stochastic component takes an explicit `u64` seed and expands it
//! with a fixed-increment SplitMix64 mix, so a single run seed fans out into
//! reproducible, well-separated substreams (one per sampler, per step, per
//! draw) without any shared mutable RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for the independent stream families hanging off one base seed.
/// The discriminant participates in seed mixing, so renumbering would change
/// every downstream sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Autoregressive = 2,
    BatchNegative = 3,
    MeanField = 4,
    Truncation = 5,
    Shuffle = 6,
    GroupAssembly = 7,
    Eval = 8,
    Corpus = 9,
    Perturb = 10,
    MarkovRow = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `(base, stream, index)` into a new seed. Distinct inputs give
/// unrelated streams; equal inputs always give the same stream.
pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(base ^ (stream as u64).rotate_left(32));
    splitmix64(a ^ index)
}

/// A counter-based RNG stream for `(base, stream, index)`.
pub fn stream_rng(base: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_deterministic_and_stream_separated() {
        let a = derive_seed(7, Stream::Init, 0);
        assert_eq!(a, derive_seed(7, Stream::Init, 0));
        assert_ne!(a, derive_seed(7, Stream::Shuffle, 0));
        assert_ne!(a, derive_seed(7, Stream::Init, 1));
        assert_ne!(a, derive_seed(8, Stream::Init, 0));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut r1 = stream_rng(42, Stream::Eval, 3);
        let mut r2 = stream_rng(42, Stream::Eval, 3);
        for _ in 0..8 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
