//! Seeded randomness with named substreams.
//!
//! Every source of randomness in an experiment derives from a single master
//! seed plus a (substream, salt) pair, so toggling one feature (say,
//! corruption evaluation) never perturbs the draws seen by another (say,
//! weight init). ChaCha streams make the substreams independent without
//! hashing tricks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named substream identifiers. The numeric value is part of the
/// reproducibility contract: renumbering changes every derived stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 0,
    /// Quantization-noise draws during memory-module training.
    Noise = 1,
    /// Batch shuffling and exemplar/replay sampling.
    Sampling = 2,
    /// Test-set corruption.
    Corruption = 3,
    /// Synthetic dataset generation.
    DataGen = 4,
    /// Long-tail subsampling.
    LongTail = 5,
}

/// A deterministic RNG for `(seed, stream, salt)`. `salt` separates uses of
/// the same stream (e.g. one per task or per epoch).
pub fn substream(seed: u64, stream: Stream, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ salt);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_independent_and_reproducible() {
        let mut a = substream(7, Stream::Init, 0);
        let mut b = substream(7, Stream::Init, 0);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());

        let mut c = substream(7, Stream::Noise, 0);
        let mut d = substream(7, Stream::Init, 1);
        let x = substream(7, Stream::Init, 0).gen::<u64>();
        assert_ne!(c.gen::<u64>(), x);
        assert_ne!(d.gen::<u64>(), x);
    }
}
