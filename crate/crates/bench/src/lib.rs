//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cqa_core::{DenseIndex, Embedding};

/// `n` random rows of width `dim` with ids `p000000..`.
pub fn random_index(n: usize, dim: usize, seed: u64) -> DenseIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n).map(|i| format!("p{i:06}")).collect();
    let rows = (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    DenseIndex::from_rows(ids, rows).expect("rows share one width")
}

pub fn random_query(dim: usize, seed: u64) -> Embedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Embedding((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Start and end score vectors of length `n`.
pub fn random_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    (draw(), draw())
}

/// `n` tokens drawn from a small vocabulary.
pub fn random_tokens(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..500))).collect()
}
