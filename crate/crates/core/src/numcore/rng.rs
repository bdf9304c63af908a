//! Named, independently positioned random streams derived from one seed.
//!
//! Each stream is a ChaCha8 generator keyed by the master seed and selected
//! by its stream id, so draws are portable across platforms and one consumer
//! never shifts another consumer's sequence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    Dropedge,
    FeatureDropout,
    Synth,
}

impl Stream {
    pub const ALL: [Stream; 6] = [
        Stream::Init,
        Stream::Shuffle,
        Stream::Dropout,
        Stream::Dropedge,
        Stream::FeatureDropout,
        Stream::Synth,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct RngStreams {
    seed: u64,
    streams: Vec<ChaCha8Rng>,
}

/// Serializable stream state: the seed plus each stream's word position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPositions {
    pub seed: u64,
    /// Decimal `u128` word positions, in [`Stream::ALL`] order.
    pub positions: Vec<String>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let streams = Stream::ALL
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s.index() as u64 + 1);
                rng
            })
            .collect();
        Self { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, stream: Stream) -> &mut ChaCha8Rng {
        &mut self.streams[stream.index()]
    }

    pub fn uniform(&mut self, stream: Stream) -> f64 {
        self.get(stream).gen::<f64>()
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, stream: Stream, p: f64) -> bool {
        self.uniform(stream) < p
    }

    pub fn shuffle<T>(&mut self, stream: Stream, items: &mut [T]) {
        items.shuffle(self.get(stream));
    }

    pub fn positions(&self) -> StreamPositions {
        StreamPositions {
            seed: self.seed,
            positions: self.streams.iter().map(|r| r.get_word_pos().to_string()).collect(),
        }
    }

    pub fn restore(saved: &StreamPositions) -> Option<Self> {
        if saved.positions.len() != Stream::ALL.len() {
            return None;
        }
        let mut out = Self::new(saved.seed);
        for (rng, pos) in out.streams.iter_mut().zip(&saved.positions) {
            rng.set_word_pos(pos.parse::<u128>().ok()?);
        }
        Some(out)
    }
}

/// Child seed for the `index`-th sub-run (fold, repeat) of a master seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
