mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transam::model::{ModelConfig, TransAm};
use transam::train::{TrainConfig, Trainer};

use common::{overfit_trace, small_dataset};

#[test]
fn single_pair_is_memorized() {
    for seed in 0..3 {
        let trace = overfit_trace(200, seed);
        let init = trace[0];
        let last = *trace.last().unwrap();
        assert!(
            (init - std::f64::consts::LN_2).abs() <= 0.15,
            "seed {seed}: initial loss {init}"
        );
        assert!(last < 0.05, "seed {seed}: final loss {last}");
    }
}

fn trainer(data: &transam::kg::Dataset, seed: u64, steps: u64) -> Trainer {
    let mut cfg = ModelConfig::new(4, 2, 1, 1);
    cfg.dropout = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, store) = TransAm::init(cfg, data.graph.entity_count(), data.graph.relation_count(), &mut rng).unwrap();
    let mut tc = TrainConfig::new(steps, 1e-3, 5);
    tc.batch_episodes = 3;
    tc.seed = seed;
    Trainer::new(model, store, tc).unwrap()
}

#[test]
fn same_seed_same_trace() {
    let data = small_dataset();
    let run = |seed| {
        let mut t = trainer(&data, seed, 30);
        for _ in 0..30 {
            t.step(&data).unwrap();
        }
        t.trace
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a, run(5));
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let data = small_dataset();
    let mut full = trainer(&data, 2, 20);
    for _ in 0..20 {
        full.step(&data).unwrap();
    }
    let mut first = trainer(&data, 2, 20);
    for _ in 0..8 {
        first.step(&data).unwrap();
    }
    let mut second = Trainer::resume(
        first.model.clone(),
        first.store.clone(),
        first.config.clone(),
        first.adam.clone(),
    )
    .unwrap();
    assert_eq!(second.step, 8);
    while second.step < 20 {
        second.step(&data).unwrap();
    }
    assert_eq!(&full.trace[8..], &second.trace[..]);
    for (name, p) in full.store.iter() {
        assert_eq!(p.data(), second.store.by_name(name).unwrap().data(), "{name}");
    }
}

#[test]
fn validation_tracks_best_snapshot() {
    let data = small_dataset();
    let mut t = trainer(&data, 1, 40);
    t.config.eval_every = 10;
    t.run(&data, transam::kg::Split::Valid).unwrap();
    assert_eq!(t.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    let best = t.best.as_ref().unwrap();
    let max = t.evals.iter().map(|e| e.report.aggregate.mrr).fold(f64::MIN, f64::max);
    assert_eq!(best.mrr, max);
    let first_max = t.evals.iter().find(|e| e.report.aggregate.mrr == max).unwrap();
    assert_eq!(best.step, first_max.step);
}
