//! Seed derivation. One user-facing seed fans out into named sub-streams
//! (weight init, projection heads, dataset split, augmentation, batch order)
//! so that two runs differing in one stream stay identical everywhere else.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named randomness streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Projection,
    Split,
    Augment,
    BatchOrder,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x494e4954,       // "INIT"
            Stream::Projection => 0x50524f4a, // "PROJ"
            Stream::Split => 0x53504c54,      // "SPLT"
            Stream::Augment => 0x4155474d,    // "AUGM"
            Stream::BatchOrder => 0x4f524452, // "ORDR"
        }
    }
}

/// SplitMix64 mixing step. Stable across platforms and versions; used for
/// all seed derivation so checkpoints stay portable.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named stream of a run.
pub fn stream_seed(run_seed: u64, stream: Stream) -> u64 {
    splitmix64(run_seed ^ splitmix64(stream.tag()))
}

/// Seed for the `index`-th element of a stream (layer index, epoch, batch).
pub fn substream_seed(run_seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(stream_seed(run_seed, stream) ^ splitmix64(index))
}

/// Seed addressed by two indices (e.g. augmentation at (epoch, batch)).
pub fn substream_seed2(run_seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    splitmix64(substream_seed(run_seed, stream, a) ^ splitmix64(b ^ 0x5bd1_e995))
}

/// The seedable, platform-independent generator used everywhere randomness
/// is consumed. Checkpoints store seeds, never generator state.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let seed = 42;
        let all = [
            Stream::Init,
            Stream::Projection,
            Stream::Split,
            Stream::Augment,
            Stream::BatchOrder,
        ];
        let seeds: Vec<u64> = all.iter().map(|s| stream_seed(seed, *s)).collect();
        for i in 0..seeds.len() {
            for j in (i + 1)..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn derivation_is_stable() {
        // Frozen values: changing these breaks checkpoint portability.
        assert_eq!(splitmix64(0), 0xe220a8397b1dcdaf);
        assert_eq!(
            stream_seed(42, Stream::Projection),
            stream_seed(42, Stream::Projection)
        );
        assert_ne!(substream_seed(7, Stream::Init, 0), substream_seed(7, Stream::Init, 1));
        assert_ne!(
            substream_seed2(7, Stream::Augment, 1, 2),
            substream_seed2(7, Stream::Augment, 2, 1)
        );
    }
}
