//! Shared fixtures for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` uniform values in `[-1, 1)` from a fixed seed.
pub fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Per-sample probability vectors over `classes`, labels and membership flags.
pub fn score_fixture(n: usize, classes: usize, seed: u64) -> Vec<pptp_core::mia::ScoreVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            pptp_core::mia::ScoreVector {
                sample_index: i,
                probs: raw.iter().map(|v| v / z).collect(),
                true_label: rng.gen_range(0..classes),
                is_member: i % 2 == 0,
            }
        })
        .collect()
}
