//! Counter-based stream splitting.
//!
//! Every random quantity comes from a ChaCha8 generator keyed by the master
//! seed; independent consumers use distinct stream numbers. A stream number
//! packs a purpose tag (high 16 bits) and an index (low 48 bits), so chain
//! `k` of a campaign always draws from the same stream regardless of how many
//! threads run the campaign.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for [`stream_id`].
pub mod purpose {
    pub const MCMC: u16 = 1;
    pub const GINIBRE: u16 = 2;
    pub const MINIMIZER: u16 = 3;
    pub const CONFIG: u16 = 4;
    pub const SYNTHETIC: u16 = 5;
}

pub fn stream_id(purpose: u16, index: u64) -> u64 {
    ((purpose as u64) << 48) | (index & ((1 << 48) - 1))
}

/// Generator for stream `id` under `master`.
pub fn stream(master: u64, id: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(id);
    r
}

pub fn tagged(master: u64, purpose: u16, index: u64) -> Rng {
    stream(master, stream_id(purpose, index))
}
