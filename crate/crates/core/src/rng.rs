//! Seeded, splittable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A reproducible random stream identified by `(master_seed, stream_id)`.
///
/// The pair maps onto a ChaCha8 key (from the master seed) and ChaCha stream
/// number, so equal pairs replay identical draws and distinct stream ids on
/// one master seed never overlap. Nested work derives children with
/// [`RngStream::substream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.master_seed);
        r.set_stream(self.stream_id);
        r
    }

    /// Child stream `id` of this stream. The child's master seed is a hash of
    /// the parent pair, so children of different parents do not collide.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream {
            master_seed: splitmix64(self.master_seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_F42D_4C95_7F2D))),
            stream_id: id,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
