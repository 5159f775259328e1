//! Seed derivation for independent deterministic random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a textual label into a child seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix to decorrelate from the master.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

pub fn stream(master: u64, label: &str) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Per-client stream keyed by `(master_seed, institution_id)`.
pub fn client_stream(master: u64, institution_id: usize) -> Stream {
    stream(master, &format!("client:{institution_id}"))
}
