//! Shared fixtures for the criterion benchmarks: deterministic synthetic
//! window batches and freshly initialized models of every cell kind.

use chrono::NaiveDate;
use garchrnn_core::data::WindowSample;
use garchrnn_core::model::{Model, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INPUT_DIM: usize = 3;

pub fn sample_batch(n: usize, window: usize, seed: u64) -> Vec<WindowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = NaiveDate::from_ymd_opt(2015, 1, 5).unwrap();
    (0..n)
        .map(|i| WindowSample {
            anchor: base + chrono::Days::new(i as u64),
            features: (0..window * INPUT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            raw_returns: (0..window).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            target: rng.gen_range(0.2..2.0),
        })
        .collect()
}

pub fn model_of(kind: ModelKind, hidden_dim: usize, num_layers: usize, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(
        kind, INPUT_DIM, hidden_dim, num_layers, 0.97, 0.01, 1.0, seed, &mut rng,
    )
}
