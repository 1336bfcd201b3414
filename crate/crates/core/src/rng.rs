//! Deterministic pseudo-randomness for the whole pipeline.
//!
//! Every random choice in the project flows from a single master seed through
//! SplitMix64 streams. Substreams are named (`"aug"`, `"shots"`, ...) so each
//! component can be driven and tested in isolation without replaying the rest
//! of the pipeline, and further split per (session, epoch, sample, ...) with
//! [`derive_seed`]. All arithmetic is integer or IEEE-754 double, so sequences
//! are bit-identical across platforms.

use sha2::{Digest, Sha256};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output mixing function (Steele, Lea & Flood 2014).
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator with a one-slot Gaussian cache for Box–Muller pairs.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    cached_gauss: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached_gauss: None,
        }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform double in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform double in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses rejection sampling so every value is
    /// exactly equally likely.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal via Box–Muller. Draws two uniforms, returns the cosine
    /// branch and caches the sine branch for the next call, so a stream of
    /// Gaussians costs one pair of uniforms per two samples.
    pub fn next_gauss(&mut self) -> f64 {
        if let Some(z) = self.cached_gauss.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// min(k, n) indices drawn without replacement from 0..n, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k.min(n));
        idx
    }
}

/// Seed for a named substream of a master seed.
///
/// The name is hashed (SHA-256, first 8 bytes little-endian) and folded into
/// the master seed through the SplitMix64 mixer, so streams for distinct names
/// are decorrelated even when master seeds are small consecutive integers.
pub fn named_seed(master_seed: u64, name: &str) -> u64 {
    mix(master_seed ^ hash_name(name))
}

/// Convenience: a generator over the named substream.
pub fn named_stream(master_seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::new(named_seed(master_seed, name))
}

/// Child seed for an indexed split of a parent stream (per session, epoch,
/// sample, augmentation copy, ...). Chains: `derive_seed(derive_seed(s, a), b)`
/// differs from `derive_seed(derive_seed(s, b), a)`.
pub fn derive_seed(parent_seed: u64, tag: u64) -> u64 {
    mix(parent_seed.wrapping_add(GOLDEN_GAMMA).wrapping_add(mix(tag)))
}

/// First 8 bytes of SHA-256(name), little-endian.
fn hash_name(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
