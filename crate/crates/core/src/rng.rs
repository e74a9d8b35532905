//! Counter-based random streams.
//!
//! Every stochastic event in the simulator draws from a stream whose key is
//! derived from stable identifiers (run seed, array id, row, column, device
//! slot, event counter). Output therefore does not depend on evaluation order
//! or thread scheduling.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of identifiers into a single stream key.
pub fn stream_key(seed: u64, ids: &[u64]) -> u64 {
    ids.iter()
        .fold(mix64(seed ^ GOLDEN), |acc, &id| mix64(acc.wrapping_add(GOLDEN) ^ mix64(id.wrapping_add(GOLDEN))))
}

/// SplitMix64 evaluated at `key + counter * GOLDEN`. Cheap to construct, so a
/// fresh stream per device event is fine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64, ids: &[u64]) -> Self {
        Self::from_key(stream_key(seed, ids))
    }

    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
