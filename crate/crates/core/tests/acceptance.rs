//! One PASS/FAIL line per acceptance criterion, at the stated tolerances.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transam::eval::{evaluate, evaluate_model, EvalOptions};
use transam::gradcheck::{gradient_check, GradCheckOptions};
use transam::kg::{generate_synthetic_kg, Dataset, Split, SyntheticSpec};
use transam::model::{
    local_mask, local_scores, project, roles, rotary_apply, HeadParams, MaskMode, ModelConfig, QuerySequence, TransAm,
};
use transam::optim::{lr_at, LrSchedule};
use transam::tape::{layer_norm, softmax_rows, Tape};
use transam::train::{TrainConfig, Trainer};
use transam::{ParamStore, Tensor};

use common::{
    assert_matches_oracle, cross_pair_entries, literal_rule_open, overfit_trace, small_dataset, tiny_batch, tiny_graph,
    tiny_model, TableScorer,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn gradients() -> Outcome {
    let start = Instant::now();
    let (_, index) = tiny_graph();
    let (model, store) = tiny_model(4, 2, 2, 1, 11);
    let batch = tiny_batch(model.cls_id());
    let report = gradient_check(
        |s, tape| {
            let mut bound = model.bind(tape, s)?;
            bound.batch_loss(tape, s, &index, &batch, None)
        },
        &store,
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let msg = format!(
        "max rel error {:.2e} over {} coords in {:.1?}",
        report.max_rel_error, report.checked, elapsed
    );
    if report.max_rel_error <= 1e-4 && report.checked == store.numel() && elapsed < Duration::from_secs(30) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, k: usize, cls: usize) -> QuerySequence {
    let mut entities = vec![cls];
    entities.extend((0..2 * k + 2).map(|_| rng.gen_range(0..6)));
    QuerySequence { entities, label: 1 }
}

fn masks() -> Outcome {
    for k in 1..=8 {
        let lit = local_mask(k, MaskMode::Literal).map_err(|e| e.to_string())?;
        let blk = local_mask(k, MaskMode::Block).map_err(|e| e.to_string())?;
        let n = 2 * k + 3;
        let mut diff = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let expected = if literal_rule_open(k, i, j) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                assert_eq!(lit.get(i, j), expected, "literal K={k} ({i},{j})");
                if lit.get(i, j) != blk.get(i, j) {
                    diff.push((i, j));
                }
            }
        }
        assert_eq!(diff, cross_pair_entries(k), "block difference K={k}");
    }
    let (_, index) = tiny_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for mode in [MaskMode::Literal, MaskMode::Block] {
        for k in 1..=3 {
            for seed in 0..10 {
                let (mut model, store) = tiny_model(4, 2, 2, k, seed);
                model.config.mask_mode = mode;
                let mask = local_mask(k, mode).unwrap();
                let seq = random_sequence(&mut rng, k, model.cls_id());
                let trace = model.trace(&store, &index, &seq).map_err(|e| e.to_string())?;
                for w in trace.local_weights.iter().flatten() {
                    for (m, v) in mask.data().iter().zip(w.data()) {
                        if m.is_infinite() {
                            worst = worst.max(v.abs());
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(worst <= 1e-12, "masked weight {worst}");
    Ok(format!("K=1..8 masks match; {checked} masked weights, max {worst:.1e}"))
}

fn rotary() -> Outcome {
    let mut norm_err = 0.0f64;
    let mut shift_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * rng.gen_range(1..9);
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let m = rng.gen_range(0..64);
        let r = rotary_apply(&v, m, 10_000.0).map_err(|e| e.to_string())?;
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm_err = norm_err.max((n0 - n1).abs());

        let width = 2 * d;
        let mut store = ParamStore::new();
        let mut w = |name: &str, r: usize, c: usize| store_insert(name, r, c, &mut rng);
        let mats = [
            w("wq", width, d),
            w("wk", width, d),
            w("wv", width, d),
            w("uq", d, d),
            w("uk", d, d),
        ];
        let ids: Vec<_> = mats.into_iter().map(|(n, t)| store.insert(n, t)).collect();
        let head = HeadParams {
            wq: ids[0],
            wk: ids[1],
            wv: ids[2],
            uq: ids[3],
            uk: ids[4],
        };
        let k = 1 + seed as usize % 3;
        let x = Tensor::uniform(&[2 * k + 3, width], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = head.bind(&mut tape, &store);
        let xv = tape.constant(x);
        let proj = project(&mut tape, xv, &hv).map_err(|e| e.to_string())?;
        let base = roles(k);
        let shift = rng.gen_range(1..20);
        let moved: Vec<usize> = base.iter().map(|r| r + shift).collect();
        let a = local_scores(&mut tape, &proj, &base, 10_000.0).map_err(|e| e.to_string())?;
        let b = local_scores(&mut tape, &proj, &moved, 10_000.0).map_err(|e| e.to_string())?;
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            shift_err = shift_err.max((p - q).abs());
        }
    }
    let msg = format!("norm err {norm_err:.1e}, shift err {shift_err:.1e} over 100 instances");
    if norm_err <= 1e-9 && shift_err <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn store_insert(name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng) -> (String, Tensor) {
    (name.to_string(), Tensor::uniform(&[r, c], 1.0, rng))
}

fn metrics() -> Outcome {
    let data = small_dataset();
    let mut queries = 0;
    let mut ties = 0;
    for seed in 0..50 {
        let split = [Split::Train, Split::Valid, Split::Test][seed as usize % 3];
        let mut opts = EvalOptions::new(1, seed);
        opts.threads = Some(2);
        let eval = evaluate(
            &TableScorer {
                seed,
                levels: 2 + seed * seed % 97,
            },
            &data,
            data.split(split),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        assert_matches_oracle(&eval);
        queries += eval.queries.len();
        ties += eval
            .queries
            .iter()
            .filter(|q| {
                let g = q.candidates.iter().position(|&c| c == q.gold).unwrap();
                q.scores.iter().enumerate().any(|(i, s)| i != g && *s == q.scores[g])
            })
            .count();
    }
    Ok(format!(
        "50 tables, {queries} queries ({ties} with gold ties) match exactly"
    ))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum_err = 0.0f64;
    let mut rows = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..12);
        let x: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    f64::NEG_INFINITY
                } else {
                    rng.gen_range(-60.0..60.0)
                }
            })
            .collect();
        if x.iter().all(|v| v.is_infinite()) {
            continue;
        }
        let y = softmax_rows(&Tensor::new(vec![1, n], x).unwrap()).map_err(|e| e.to_string())?;
        sum_err = sum_err.max((y.data().iter().sum::<f64>() - 1.0).abs());
        rows += 1;
    }
    let (_, index) = tiny_graph();
    for k in 1..=3 {
        let (model, store) = tiny_model(4, 2, 2, k, k as u64);
        let seq = random_sequence(&mut rng, k, model.cls_id());
        let trace = model.trace(&store, &index, &seq).map_err(|e| e.to_string())?;
        for w in trace.local_weights.iter().chain(&trace.global_weights).flatten() {
            for r in w.rows() {
                sum_err = sum_err.max((r.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
        sum_err = sum_err.max((trace.probs.iter().sum::<f64>() - 1.0).abs());
    }
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let d = rng.gen_range(2..64);
        let scale = rng.gen_range(20.0..500.0);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let m = x.iter().sum::<f64>() / d as f64;
        if x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d as f64) < 10.0 {
            continue;
        }
        let y = layer_norm(
            &Tensor::new(vec![1, d], x).unwrap(),
            &Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            &Tensor::zeros(&[d]),
            transam::model::LN_EPS,
        )
        .map_err(|e| e.to_string())?;
        let mean = y.data().iter().sum::<f64>() / d as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        mean_err = mean_err.max(mean.abs());
        var_err = var_err.max((var - 1.0).abs());
    }
    let msg = format!("{rows} softmax rows, sum err {sum_err:.1e}; LN mean {mean_err:.1e}, var err {var_err:.1e}");
    if sum_err <= 1e-9 && mean_err <= 1e-9 && var_err <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn overfit() -> Outcome {
    let trace = overfit_trace(200, 0);
    let (init, last) = (trace[0], *trace.last().unwrap());
    let msg = format!("initial loss {init:.4}, after 200 steps {last:.5}");
    if (init - std::f64::consts::LN_2).abs() <= 0.15 && last < 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn synthetic_learning() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let data = Dataset::from_synthetic(generate_synthetic_kg(&spec).map_err(|e| e.to_string())?, 50, 0)
        .map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::new(16, 2, 2, 1);
    cfg.dropout = 0.1;
    let seed = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, store) = TransAm::init(cfg, data.graph.entity_count(), data.graph.relation_count(), &mut rng)
        .map_err(|e| e.to_string())?;
    let opts = EvalOptions::new(1, seed);
    let baseline = evaluate_model(&model, &store, &data, &data.tasks.valid, &opts)
        .map_err(|e| e.to_string())?
        .report
        .aggregate
        .mrr;
    let mut tc = TrainConfig::new(5000, 1e-3, 500);
    tc.seed = seed;
    tc.eval_every = 500;
    tc.patience = 100;
    let mut trainer = Trainer::new(model, store, tc).map_err(|e| e.to_string())?;
    trainer.run(&data, Split::Valid).map_err(|e| e.to_string())?;
    let best = trainer.best.as_ref().map_or(0.0, |b| b.mrr);
    let elapsed = start.elapsed();
    let msg = format!(
        "valid MRR {best:.3} (best of {} evals), frozen-random baseline {baseline:.3}, {:.0?}",
        trainer.evals.len(),
        elapsed
    );
    if best >= 0.5 && best - baseline >= 0.2 && elapsed < Duration::from_secs(600) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn schedule() -> Outcome {
    let s = LrSchedule::new(5e-5, 10_000, 100_000).map_err(|e| e.to_string())?;
    assert_eq!(lr_at(&s, 10_000), 5e-5);
    assert_eq!(lr_at(&s, 0), 0.0);
    assert_eq!(lr_at(&s, 100_000), 0.0);
    assert_eq!(lr_at(&s, 5_000), 2.5e-5);
    assert_eq!(lr_at(&s, 2_500), 1.25e-5);
    assert_eq!(lr_at(&s, 55_000), 2.5e-5);
    assert_eq!(lr_at(&s, 77_500), 1.25e-5);
    for step in (0..100_000).step_by(997) {
        let (a, b, c) = (lr_at(&s, step), lr_at(&s, step + 1), lr_at(&s, step + 2));
        if step + 2 <= 10_000 || step >= 10_000 {
            assert!(((c - b) - (b - a)).abs() <= 1e-20, "curvature at {step}");
        }
    }
    Ok("peak 5e-5 at step 10000, 0 at ends, linear ramps".into())
}

fn determinism() -> Outcome {
    let data = small_dataset();
    let run = || {
        let cfg = ModelConfig::new(8, 2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, store) =
            TransAm::init(cfg, data.graph.entity_count(), data.graph.relation_count(), &mut rng).unwrap();
        let mut tc = TrainConfig::new(50, 1e-3, 5);
        tc.seed = 3;
        let mut t = Trainer::new(model, store, tc).unwrap();
        for _ in 0..50 {
            t.step(&data).unwrap();
        }
        t
    };
    let a = run();
    let b = run();
    assert_eq!(a.trace, b.trace, "loss traces differ");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.tam");
    let meta = transam::checkpoint::CheckpointMeta {
        model: a.model.config.clone(),
        entity_count: data.graph.entity_count(),
        relation_count: data.graph.relation_count(),
        step: a.step,
        metrics: None,
    };
    transam::checkpoint::save_checkpoint(&path, &a.store, &meta, Some(&a.adam)).map_err(|e| e.to_string())?;
    let ck = transam::checkpoint::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let opts = EvalOptions::new(1, 3);
    let mut worst = 0.0f64;
    let mut n = 0;
    for split in [Split::Valid, Split::Test] {
        let x = evaluate_model(&a.model, &a.store, &data, data.split(split), &opts).map_err(|e| e.to_string())?;
        let y = evaluate_model(&ck.model, &ck.store, &data, data.split(split), &opts).map_err(|e| e.to_string())?;
        for (p, q) in x.queries.iter().zip(&y.queries) {
            for (s, t) in p.scores.iter().zip(&q.scores) {
                worst = worst.max((s - t).abs());
                n += 1;
            }
        }
    }
    let msg = format!("identical traces over 50 steps; {n} scores after reload, max change {worst:.1e}");
    if worst <= 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradients),
        ("mask oracle", masks),
        ("rotary properties", rotary),
        ("metric oracle", metrics),
        ("normalization invariants", normalization),
        ("overfit smoke", overfit),
        ("synthetic learning", synthetic_learning),
        ("schedule", schedule),
        ("determinism and persistence", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg}", i + 1),
            Err(msg) => {
                println!("criterion {}: FAIL {name}: {msg}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
