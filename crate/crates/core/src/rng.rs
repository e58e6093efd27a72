//! Seeded, splittable random streams.
//!
//! A [`Stream`] is a 64-bit key. Child keys are derived by mixing in a tag
//! (replicate index, simulation index, redraw attempt), so the random numbers
//! consumed by replicate `b` depend only on `(master_seed, b)` and never on
//! thread scheduling. Each key seeds a ChaCha8 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream(u64);

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Stream {
    pub fn new(master_seed: u64) -> Self {
        Stream(splitmix64(master_seed))
    }

    pub fn key(self) -> u64 {
        self.0
    }

    pub fn derive(self, tag: u64) -> Stream {
        Stream(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    /// Derives along a named lane so unrelated uses of the same index differ.
    pub fn lane(self, name: &str) -> Stream {
        let h = name.bytes().fold(0xCBF2_9CE4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.derive(h)
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
