//! Counter-based random streams.
//!
//! A stream is a ChaCha8 keystream keyed by `(seed, stream_offset)`. Path `i` of a
//! batch reads ChaCha stream (nonce) `i` of that key, so any path can be regenerated
//! on its own and splitting a batch across threads cannot change the numbers drawn.
//!
//! Uniforms take the top 52 bits of a word, shifted to the open interval (0, 1).
//! Normals use the ziggurat method.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub stream_offset: u64,
}

impl StreamKey {
    pub fn new(seed: u64, stream_offset: u64) -> Self {
        StreamKey {
            seed,
            stream_offset,
        }
    }

    /// Generator for path `path` of this key.
    pub fn path_rng(&self, path: u64) -> PathRng {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.stream_offset.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(path);
        PathRng { rng }
    }
}

/// Sequential reader over one path's stream.
pub struct PathRng {
    rng: ChaCha8Rng,
}

impl PathRng {
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        use rand_core::RngCore;
        u64_to_open01(self.rng.next_u64())
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

#[inline]
pub fn u64_to_open01(x: u64) -> f64 {
    ((x >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}
