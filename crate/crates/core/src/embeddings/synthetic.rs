//! Deterministic pseudo-embeddings.
//!
//! The vector for a key is fully specified so that other implementations (the
//! embedding service's deterministic mode) can reproduce it bit for bit:
//!
//! 1. `base` = first 8 bytes, little-endian, of `SHA-256(seed as u64 LE || key UTF-8)`.
//! 2. The i-th raw draw (i = 0, 1, ...) is the SplitMix64 output for state
//!    `base + (i + 1) * 0x9E3779B97F4A7C15` (wrapping).
//! 3. Each draw maps to `u = ((x >> 11) + 0.5) * 2^-53`, a uniform in (0, 1).
//! 4. Consecutive pairs `(u1, u2)` give two standard normals by Box-Muller:
//!    `r = sqrt(-2 ln u1)`, `z0 = r cos(2π u2)`, `z1 = r sin(2π u2)`.
//! 5. The first `dim` normals are divided by their Euclidean norm in `f64`,
//!    then rounded to `f32`.

use sha2::{Digest, Sha256};

use super::{EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: u64) -> u64 {
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_base(seed: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn uniform(base: u64, counter: u64) -> f64 {
    let x = splitmix64(base.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)));
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// The synthetic vector for `key` under `seed`.
pub fn synthetic_vector(seed: u64, key: &str, dim: usize) -> EmbeddingVector {
    let base = key_base(seed, key);
    let mut normals = Vec::with_capacity(dim + 1);
    let mut counter = 0u64;
    while normals.len() < dim {
        let u1 = uniform(base, counter);
        let u2 = uniform(base, counter + 1);
        counter += 2;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        normals.push(r * theta.cos());
        normals.push(r * theta.sin());
    }
    normals.truncate(dim);
    let norm = normals.iter().map(|z| z * z).sum::<f64>().sqrt();
    let values = normals.into_iter().map(|z| (z / norm) as f32).collect();
    EmbeddingVector::new(values).expect("normalized normals are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticProvider {
    seed: u64,
    dim: usize,
}

impl SyntheticProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "synthetic dimension must be positive");
        SyntheticProvider { seed, dim }
    }

    pub fn vector(&self, key: &str) -> EmbeddingVector {
        synthetic_vector(self.seed, key, self.dim)
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.vector(item.key.as_str()))
    }
}
