//! Deterministic random streams. Every stochastic component derives its own
//! ChaCha stream from `(master seed, purpose tags)`, so results are
//! reproducible bit-for-bit regardless of how work is scheduled.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::math;

/// The RNG used throughout the crate.
pub type Stream = ChaCha12Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a list of purpose words (stage id, sample index,
/// chain id, ...) into a child seed.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6C62_272E_07BB_0142);
    for &w in words {
        h = splitmix64(h ^ w.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    h
}

/// Child stream for a derived seed; see [`derive_seed`].
pub fn derive_stream(seed: u64, words: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(seed, words))
}

/// One standard-normal draw (Box-Muller on the ChaCha uniform stream).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0,1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

/// Fills `out` with standard-normal draws.
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
}
