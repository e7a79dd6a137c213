//! Seeded random streams.
//!
//! Every consumer derives its own stream from a root seed and a label, so
//! adding a consumer never shifts the numbers another one sees.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

pub type StreamRng = ChaCha8Rng;

/// Mix a root seed with stream labels into an independent seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&seed.to_le_bytes());
    let mut h = math::fnv1a(bytes);
    for l in labels {
        h = math::fnv1a(h.to_le_bytes().into_iter().chain(l.to_le_bytes()));
        // splitmix finaliser for avalanche
        h ^= h >> 30;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub fn stream(seed: u64, labels: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Standard normal draw (Box-Muller).
pub fn normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2);
    }
}

/// Text labels for stream derivation.
pub fn label(s: &str) -> u64 {
    math::fnv1a(s.bytes())
}
