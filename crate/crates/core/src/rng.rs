//! Counter-based random substreams.
//!
//! Each consumer (bootstrap replicate, simulation replicate, oracle batch, ...)
//! gets its own ChaCha20 stream keyed by the master seed and a domain tag and
//! selected by an index. Streams never overlap, so parallel execution gives
//! the same numbers as sequential execution regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// What a substream is used for. Distinct domains get distinct keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    EtaDraws = 1,
    ThetaBootstrap = 2,
    HospitalParams = 3,
    Replicate = 4,
    Oracle = 5,
    Assignment = 6,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream `index` of the generator keyed by `(master, domain)`.
pub fn substream(master: u64, domain: Domain, index: u64) -> ChaCha20Rng {
    let mut state = master ^ ((domain as u64) << 56) ^ 0x5DEE_CE66_D1CE_4E5B;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(index);
    rng
}

/// Derive a child seed (e.g. a per-replicate seed) from a master seed.
pub fn child_seed(master: u64, domain: Domain, index: u64) -> u64 {
    use rand::RngCore;
    substream(master, domain, index).next_u64()
}
