//! Seeded random streams.
//!
//! Every random quantity in the crate (network weights, the fixed input `z`,
//! synthetic noise) is drawn from a [`SplitMix64`] generator. Independent
//! streams are split off a master seed with [`derive_seed`], so the weights
//! and the input tensor never share a sequence.

use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

/// Stream labels used when splitting a seed.
pub mod stream {
    pub const WEIGHTS: &str = "weights";
    pub const INPUT: &str = "input";
    pub const NOISE: &str = "noise";
}

/// Derives a child seed from a parent seed and a list of labels.
///
/// Stable across platforms and releases: it hashes the little-endian seed and
/// the label bytes with SHA-256 and keeps the first eight bytes.
pub fn derive_seed(seed: u64, labels: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label);
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn stream_rng(seed: u64, label: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(seed, &[label.as_bytes()]))
}

/// Uniform sample on `[low, high)`.
pub fn uniform(rng: &mut SplitMix64, low: f64, high: f64) -> f64 {
    low + (high - low) * rng.random::<f64>()
}

/// Standard normal pair via the Box–Muller transform.
pub fn box_muller(rng: &mut SplitMix64) -> (f64, f64) {
    // 1 - u keeps the argument of ln inside (0, 1].
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = 2.0 * std::f64::consts::PI * u2;
    (radius * angle.cos(), radius * angle.sin())
}

/// Fills `out` with i.i.d. N(0, 1) samples.
pub fn fill_standard_normal(rng: &mut SplitMix64, out: &mut [f64]) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (a, b) = box_muller(rng);
        pair[0] = a;
        pair[1] = b;
    }
    if let [last] = chunks.into_remainder() {
        *last = box_muller(rng).0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_label() {
        let a = derive_seed(7, &[b"weights"]);
        let b = derive_seed(7, &[b"input"]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, &[b"weights"]));
    }

    #[test]
    fn label_boundaries_matter() {
        assert_ne!(derive_seed(1, &[b"ab", b"c"]), derive_seed(1, &[b"a", b"bc"]));
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream_rng(3, "t");
        let mut buf = vec![0.0; 200_001];
        fill_standard_normal(&mut rng, &mut buf);
        let n = buf.len() as f64;
        let mean = buf.iter().sum::<f64>() / n;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
