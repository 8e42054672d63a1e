//! Synthetic binary classification data: a random hyperplane with label
//! noise near the boundary.

use rand::Rng;

use super::dataset::Dataset;
use crate::paillier::seeded_rng;

/// Features are uniform in `[−2, 2]`. The label is the sign of
/// `w·x + b + ε` with `w` uniform in `[−1, 1]`, `b` uniform in `[−0.5, 0.5]`
/// and `ε` uniform in `[−0.25, 0.25]`.
pub fn generate(rows: usize, features: usize, seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed);
    let w: Vec<f64> = (0..features).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let b: f64 = rng.gen_range(-0.5..=0.5);
    let mut data = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x: Vec<f64> = (0..features).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let score = super::math::dot(&w, &x) + b + rng.gen_range(-0.25..=0.25);
        labels.push(if score >= 0.0 { 1.0 } else { -1.0 });
        data.push(x);
    }
    Dataset {
        ids: (0..rows as u64).collect(),
        feature_names: (0..features).map(|j| format!("x{j}")).collect(),
        features: data,
        labels: Some(labels),
    }
}
