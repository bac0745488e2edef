//! Seeded RNG plumbing. Every random draw in the crate flows through a
//! `ChaCha8Rng` derived from a run seed plus a purpose tag, so independent
//! streams (init, data, batch order) stay decoupled and reproducible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ModelInit,
    ModulationInit,
    Data,
    TrainBatches,
    ValBatches,
    MetaBatches,
    Test,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ModelInit => 0x6d6f_64656c,
            Stream::ModulationInit => 0x6d6f_6475,
            Stream::Data => 0x6461_7461,
            Stream::TrainBatches => 0x7472_61696e,
            Stream::ValBatches => 0x0076_616c,
            Stream::MetaBatches => 0x6d65_7461,
            Stream::Test => 0x7465_7374,
        }
    }
}

/// splitmix64 finalizer; decorrelates seed/tag pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for one purpose-specific stream of a run.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream.tag())))
}

/// Uniform draw in [-bound, bound).
pub fn uniform_symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    rng.gen_range(-bound..bound)
}
