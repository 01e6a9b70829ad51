//! Deterministic, counter-split random streams.
//!
//! Every stochastic stage derives its own ChaCha stream from the master
//! seed plus a purpose tag and index path, so independent units of work
//! (windows in a batch, samples in an ensemble, per-step GMM fits) draw
//! identical values regardless of execution order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Stream purposes; values are arbitrary but fixed.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const OBSERVE: u64 = 3;
    pub const FORECAST: u64 = 4;
    pub const GMM: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SPLIT: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from `master` and a tag path.
pub fn derive(master: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut s = splitmix64(master ^ 0xD1B5_4A32_D192_ED03);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    let mut seed = [0u8; 32];
    let mut v = s;
    for chunk in seed.chunks_mut(8) {
        v = splitmix64(v);
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Vector of standard-normal draws.
pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
