//! Reproducible random-number streams.
//!
//! Every Monte Carlo routine in this crate draws from a `Stream` obtained via
//! [`stream`], keyed by `(master_seed, path_index, purpose)`. The triple is
//! written verbatim into a ChaCha8 key, so distinct triples give independent
//! streams by construction and no coordination between workers is needed:
//! path `i` produces the same noise whether it runs on one thread or sixteen.
//!
//! Purposes separate the independent noise sources consumed by one path
//! (Brownian skeleton, bridge refinement, jump events, ...) so that, for
//! example, refining a Brownian path does not perturb its jump times.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

/// Counter-based generator behind every stream in the crate.
pub type Stream = ChaCha8Rng;

/// Independent noise sources consumed by a single path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Level-0 Brownian increments.
    Brownian = 1,
    /// Midpoint draws for dyadic bridge refinement.
    Bridge = 2,
    /// Jump count, jump times, and marks.
    Jumps = 3,
    /// Auxiliary draws for audits (sampled assumption checks, subsampling,
    /// bootstrap resampling).
    Audit = 4,
}

/// Builds the stream for `(master_seed, path, purpose)`.
///
/// The key layout is the little-endian concatenation
/// `master_seed || path || purpose || DOMAIN`; ChaCha8 does all mixing.
pub fn stream(master_seed: u64, path: u64, purpose: Purpose) -> Stream {
    // Domain constant keeps these keys disjoint from any other ChaCha use.
    const DOMAIN: u64 = 0x7374_6d5f_6e6f_6973; // "stm_nois"
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(path).to_le_bytes());
    seed[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    seed[24..32].copy_from_slice(&DOMAIN.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// One standard normal draw.
#[inline]
pub fn standard_normal(stream: &mut Stream) -> f64 {
    stream.sample(StandardNormal)
}

/// Fills `out` with independent standard normal draws.
pub fn fill_standard_normal(stream: &mut Stream, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = stream.sample(StandardNormal);
    }
}

/// One Poisson(`mean`) draw. `mean` must be finite and non-negative;
/// `mean == 0` yields 0 without consuming randomness.
pub fn poisson(stream: &mut Stream, mean: f64) -> u64 {
    assert!(mean.is_finite() && mean >= 0.0, "Poisson mean must be finite and >= 0");
    if mean == 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("validated Poisson mean");
    let x: f64 = stream.sample(dist);
    x as u64
}
