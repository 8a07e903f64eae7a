//! Independent random streams per replication and purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for within one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    TrainCounts,
    Subsample,
    CountNoise,
    TestScores,
    /// Federated optimizer run for one query label.
    Optimizer(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 0,
            Stream::TrainCounts => 1,
            Stream::Subsample => 2,
            Stream::CountNoise => 3,
            Stream::TestScores => 4,
            Stream::Optimizer(label) => 16 + label as u64,
        }
    }
}

/// ChaCha8 keyed by the master seed, on a stream number derived from the
/// replication index and purpose, so streams never overlap.
pub fn stream_rng(seed: u64, replication: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((replication as u64) << 32) | purpose.id());
    rng
}
