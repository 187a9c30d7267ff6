//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transam::kg::{generate_synthetic_kg, Dataset, SyntheticSpec};
use transam::model::{ModelConfig, QuerySequence, TransAm};
use transam::train::{sample_batch, TrainConfig, Trainer};
use transam::{ParamStore, Tensor};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The default synthetic graph (200 entities, 12 few-shot relations).
pub fn dataset() -> Dataset {
    let kg = generate_synthetic_kg(&SyntheticSpec::default()).expect("default spec is feasible");
    Dataset::from_synthetic(kg, 50, 0).expect("synthetic data is consistent")
}

pub fn model(data: &Dataset, d_e: usize, heads: usize, layers: usize) -> (TransAm, ParamStore) {
    let mut config = ModelConfig::new(d_e, heads, layers, 1);
    config.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    TransAm::init(config, data.graph.entity_count(), data.graph.relation_count(), &mut rng).expect("valid model config")
}

/// `episodes` positive sequences, each followed by one negative.
pub fn batch(data: &Dataset, episodes: usize) -> Vec<QuerySequence> {
    sample_batch(data, 1, episodes, 1, &mut ChaCha8Rng::seed_from_u64(1)).expect("training relations exist")
}

pub fn trainer(data: &Dataset, d_e: usize) -> Trainer {
    let (m, s) = model(data, d_e, 2, 2);
    Trainer::new(m, s, TrainConfig::new(1_000_000, 1e-3, 100)).expect("valid train config")
}
