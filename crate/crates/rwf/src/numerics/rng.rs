//! Seeded random number generation.
//!
//! ChaCha is a counter-based stream cipher, so a given 64-bit seed yields a
//! bit-identical draw sequence on every platform and every run. Gaussian
//! draws use Box-Muller on top of the raw stream (no platform-dependent
//! ziggurat tables), and substreams are derived by label so that e.g. the
//! stream generator and the model initializer never share state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::matrix::Matrix;

/// Deterministic random stream; same seed, same sequence, everywhere.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare_gauss: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; stable across platforms and Rust versions,
/// unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut state = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        RngStream {
            seed,
            rng: ChaCha8Rng::from_seed(key),
            spare_gauss: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for a named purpose.
    pub fn derive(&self, label: &str) -> RngStream {
        RngStream::new(self.seed ^ fnv1a(label.as_bytes()))
    }

    /// Child stream for a named purpose plus an index (per-task, per-epoch, ...).
    pub fn derive_indexed(&self, label: &str, index: u64) -> RngStream {
        let mut mix = self.seed ^ fnv1a(label.as_bytes());
        mix ^= splitmix64(&mut (index ^ 0xa076_1d64_78bd_642f));
        RngStream::new(mix)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_gauss.take() {
            return z;
        }
        // u1 in (0, 1] so ln never sees zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Matrix of i.i.d. N(0, std^2) entries; std = 0 gives a zero matrix.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        assert!(std >= 0.0, "std must be non-negative");
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = std * self.normal();
        }
        m
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
