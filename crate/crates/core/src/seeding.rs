//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that get their own generator, so adding draws in one stage
/// never shifts another stage's randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Preprocess,
    Init,
    Training,
    Kmeans,
    Synth,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Preprocess => 0x7072_6570,
            Stream::Init => 0x696e_6974,
            Stream::Training => 0x7472_6169,
            Stream::Kmeans => 0x6b6d_6e73,
            Stream::Synth => 0x7379_6e74,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for `stream` under `master`.
pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(master) ^ stream.tag())
}

pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

/// Generator for one numbered unit of work (a training step, a k-means
/// restart) within `stream`. Depends only on its arguments.
pub fn indexed_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(master, stream);
    rng.set_stream(index);
    rng
}
