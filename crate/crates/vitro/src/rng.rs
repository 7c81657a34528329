//! Seed plumbing. Every random draw in the crate comes from a ChaCha8 stream
//! seeded here, so runs are reproducible bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; used to derive decorrelated child seeds from a master
/// seed plus a stream tag.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stream tags for the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ParamInit,
    VocabInit,
    BatchShuffle,
    TemplateChoice,
    DataNoise,
    RandomVocabBaseline,
    Stage2Init,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ParamInit => 1,
            Stream::VocabInit => 2,
            Stream::BatchShuffle => 3,
            Stream::TemplateChoice => 4,
            Stream::DataNoise => 5,
            Stream::RandomVocabBaseline => 6,
            Stream::Stage2Init => 7,
        }
    }
}

pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ splitmix64(stream.tag()))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    seeded(derive_seed(master, stream))
}

/// Deterministic per-key value used where a choice must depend on stable
/// identities (e.g. template pick keyed by epoch and window id) rather than
/// on iteration order.
pub fn keyed_u64(master: u64, a: u64, b: u64) -> u64 {
    splitmix64(master ^ splitmix64(a).wrapping_add(splitmix64(b.wrapping_add(0xabcdef))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_decorrelated_and_stable() {
        let a = derive_seed(42, Stream::ParamInit);
        let b = derive_seed(42, Stream::VocabInit);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(42, Stream::ParamInit));
    }

    #[test]
    fn keyed_values_differ_across_keys() {
        assert_ne!(keyed_u64(7, 0, 1), keyed_u64(7, 1, 0));
        assert_eq!(keyed_u64(7, 3, 9), keyed_u64(7, 3, 9));
    }
}
