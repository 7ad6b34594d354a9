//! Counter-based Gaussian noise streams.
//!
//! Every (master seed, stream, counter) triple maps to an independent ChaCha8
//! generator, so randomness is a pure function of the coordinates that name
//! it. Parallel workers cannot reorder draws: particle `i` at step `k`
//! always consumes the same increments no matter which thread computes it,
//! and replaying a configuration is bit-identical at any worker count.
//!
//! Streams are laid out as: stream = particle index, counter = step index
//! (counter 0 is reserved for initial sampling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 finalizer; used to derive per-(stream, counter) keys.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(master: u64, stream: u64, counter: u64) -> [u8; 32] {
    let mut state = mix64(master ^ mix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)));
    state = mix64(state ^ mix64(counter.wrapping_add(0x1405_7B7E_F767_814F)));
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = mix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Generator for one (stream, counter) cell.
pub fn cell_rng(master: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(master, stream, counter))
}

/// Fill `buf` with standard normal draws for the given cell.
#[inline]
pub fn fill_normals(master: u64, stream: u64, counter: u64, buf: &mut [f64]) {
    let mut rng = cell_rng(master, stream, counter);
    for v in buf.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// Fill `buf` with uniform draws in [0, 1) for the given cell.
#[inline]
pub fn fill_uniforms(master: u64, stream: u64, counter: u64, buf: &mut [f64]) {
    let mut rng = cell_rng(master, stream, counter);
    for v in buf.iter_mut() {
        *v = rand::Rng::random::<f64>(&mut rng);
    }
}
