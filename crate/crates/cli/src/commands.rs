use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use transam::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use transam::eval::{evaluate_model, loss_csv, split_support, EvalOptions, RankingReport};
use transam::gradcheck::{gradient_check, GradCheckOptions};
use transam::kg::{
    candidates_to_json, generate_synthetic_kg, write_tasks, write_triples, Dataset, Episode, Split, SyntheticSpec,
};
use transam::model::{build_sequence, MaskMode, ModelConfig, QuerySequence, TransAm};
use transam::train::{sample_batch, StopReason, Trainer};
use transam::{ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::CliError;

/// Largest model `gradcheck` accepts.
pub const GRADCHECK_MAX_DIM: usize = 8;
pub const GRADCHECK_MAX_LAYERS: usize = 2;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn dump<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

pub fn generate(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("configuration has no [synthetic] section".into()))?;
    let out = cfg.out_dir()?;
    let kg = generate_synthetic_kg(spec)?;
    create_dir(out)?;
    write_triples(&kg.graph, out.join("triples.txt"))?;
    for (split, tasks) in [
        ("train", &kg.tasks.train),
        ("valid", &kg.tasks.valid),
        ("test", &kg.tasks.test),
    ] {
        write_tasks(tasks, &kg.graph, out.join(format!("tasks_{split}.json")))?;
    }
    write(
        &out.join("candidates.json"),
        candidates_to_json(&kg.candidates, &kg.graph),
    )?;
    let count = |t: &transam::kg::Tasks| t.values().map(Vec::len).sum::<usize>();
    let summary = json!({
        "entities": kg.graph.entity_count(),
        "relations": kg.graph.relation_count(),
        "background_triples": kg.graph.background().len(),
        "train": {"relations": kg.tasks.train.len(), "triples": count(&kg.tasks.train)},
        "valid": {"relations": kg.tasks.valid.len(), "triples": count(&kg.tasks.valid)},
        "test": {"relations": kg.tasks.test.len(), "triples": count(&kg.tasks.test)},
    });
    Ok(dump(&summary))
}

fn check_vocabulary(meta: &CheckpointMeta, data: &Dataset) -> Result<(), CliError> {
    let (e, r) = (data.graph.entity_count(), data.graph.relation_count());
    if meta.entity_count != e || meta.relation_count != r {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary ({} entities, {} relations) does not match the data ({e} entities, {r} relations)",
            meta.entity_count, meta.relation_count
        )));
    }
    Ok(())
}

fn eval_options(cfg: &RunConfig, k: usize, relations: Option<Vec<String>>) -> EvalOptions {
    let mut opts = EvalOptions::new(k, cfg.eval_seed());
    opts.relations = relations;
    opts
}

/// Trains (or resumes from `checkpoint`) and writes `checkpoint.tam`,
/// `best.tam`, `loss.csv`, `evals.json` and `metrics.json` into the output
/// directory.
pub fn train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<RankingReport, CliError> {
    let out = cfg.out_dir()?.to_path_buf();
    let data = cfg.dataset()?;
    let train_config = cfg.train_config()?;
    let mut trainer = match checkpoint {
        Some(path) => {
            let Checkpoint {
                model,
                store,
                meta,
                adam,
            } = load_checkpoint(path)?;
            check_vocabulary(&meta, &data)?;
            let wanted = cfg.model_config()?;
            if wanted != model.config {
                log::warn!("resuming with the checkpoint's model config; [model] is ignored");
            }
            let adam = adam.ok_or_else(|| {
                CliError::Config(format!("{} holds no optimizer state to resume from", path.display()))
            })?;
            log::info!("resuming from {} at step {}", path.display(), adam.step);
            Trainer::resume(model, store, train_config, adam)?
        }
        None => {
            let (model, store) = cfg.init_model(&data)?;
            Trainer::new(model, store, train_config)?
        }
    };
    create_dir(&out)?;

    let split = cfg.eval.split;
    let stop = match trainer.run(&data, split) {
        Ok(s) => s,
        Err(e @ transam::Error::NonFinite(_)) => {
            let path = out.join("nan_dump.json");
            let batch: Vec<&QuerySequence> = trainer.last_batch.iter().collect();
            let diag = json!({"step": trainer.step + 1, "error": e.to_string(), "batch": batch});
            write(&path, dump(&diag))?;
            log::error!("numeric abort, batch written to {}", path.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    match stop {
        StopReason::Finished => log::info!("finished after step {}", trainer.step),
        StopReason::EarlyStopped => log::info!("early stop after step {}", trainer.step),
    }

    let meta = CheckpointMeta {
        model: trainer.model.config.clone(),
        entity_count: data.graph.entity_count(),
        relation_count: data.graph.relation_count(),
        step: trainer.step,
        metrics: None,
    };
    save_checkpoint(out.join("checkpoint.tam"), &trainer.store, &meta, Some(&trainer.adam))?;

    let mut best = trainer.best_store().clone();
    best.quantize_f32();
    let opts = eval_options(cfg, trainer.model.config.k, None);
    let report = evaluate_model(&trainer.model, &best, &data, data.split(split), &opts)?.report;
    let best_meta = CheckpointMeta {
        step: trainer.best.as_ref().map_or(trainer.step, |b| b.step),
        metrics: Some(report.clone()),
        ..meta
    };
    save_checkpoint(out.join("best.tam"), &best, &best_meta, None)?;
    write(&out.join("loss.csv"), loss_csv(&trainer.trace))?;
    write(&out.join("evals.json"), dump(&trainer.evals))?;
    write(&out.join("metrics.json"), report.to_json())?;
    Ok(report)
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    relations: Option<Vec<String>>,
    mask: Option<MaskMode>,
) -> Result<RankingReport, CliError> {
    let data = cfg.dataset()?;
    let mut ck = load_checkpoint(checkpoint)?;
    check_vocabulary(&ck.meta, &data)?;
    if let Some(m) = mask {
        ck.model.config.mask_mode = m;
    }
    let opts = eval_options(cfg, ck.model.config.k, relations);
    Ok(evaluate_model(&ck.model, &ck.store, &data, data.split(split), &opts)?.report)
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

/// `-inf` entries become `null`.
fn mask_matrix(t: &Tensor) -> Vec<Vec<Option<f64>>> {
    t.rows()
        .map(|r| r.iter().map(|&v| v.is_finite().then_some(v)).collect())
        .collect()
}

fn named_episode(data: &Dataset, names: &[String], k: usize) -> Result<Episode, CliError> {
    if names.len() != 2 * k + 2 {
        return Err(CliError::Config(format!(
            "--episode needs {} entity names (K={k} support pairs and a query pair), got {}",
            2 * k + 2,
            names.len()
        )));
    }
    let ids = names
        .iter()
        .map(|n| data.graph.entity_id(n.trim()))
        .collect::<transam::Result<Vec<_>>>()?;
    let pairs: Vec<_> = ids.chunks(2).map(|c| (c[0], c[1])).collect();
    Ok(Episode {
        relation: 0,
        support: pairs[..k].to_vec(),
        query_pos: pairs[k],
        query_neg: Vec::new(),
    })
}

fn default_episode(data: &Dataset, split: Split, k: usize, seed: u64) -> Result<Episode, CliError> {
    let tasks = data.split(split);
    let (name, triples) = tasks
        .iter()
        .find(|(_, t)| t.len() > k)
        .ok_or_else(|| CliError::Config(format!("no {split} relation has at least {} triples", k + 1)))?;
    let (support, queries) = split_support(name, triples, k, seed)?;
    Ok(Episode {
        relation: data.graph.relation_id(name)?,
        support,
        query_pos: queries[0].pair(),
        query_neg: Vec::new(),
    })
}

pub fn inspect(
    cfg: &RunConfig,
    checkpoint: &Path,
    episode: Option<Vec<String>>,
    split: Split,
    mask: Option<MaskMode>,
) -> Result<String, CliError> {
    let data = cfg.dataset()?;
    let mut ck = load_checkpoint(checkpoint)?;
    check_vocabulary(&ck.meta, &data)?;
    if let Some(m) = mask {
        ck.model.config.mask_mode = m;
    }
    let k = ck.model.config.k;
    let ep = match episode {
        Some(names) => named_episode(&data, &names, k)?,
        None => default_episode(&data, split, k, cfg.eval_seed())?,
    };
    let seq = build_sequence(&ep, ep.query_pos, ck.model.cls_id());
    let trace = ck.model.trace(&ck.store, &data.neighbors, &seq)?;
    let layout = ck.model.config.layout()?;
    let names: Vec<&str> = seq
        .entities
        .iter()
        .map(|&e| {
            if e == ck.model.cls_id() {
                "[CLS]"
            } else {
                data.graph.entity_name(e)
            }
        })
        .collect();
    let blocks: Vec<_> = trace
        .local_weights
        .iter()
        .zip(&trace.global_weights)
        .map(|(locals, globals)| {
            let heads: Vec<_> = locals
                .iter()
                .zip(globals)
                .map(|(l, g)| json!({"local": matrix(l), "global": matrix(g)}))
                .collect();
            json!({ "heads": heads })
        })
        .collect();
    let doc = json!({
        "k": k,
        "mask_mode": ck.model.config.mask_mode,
        "entities": names,
        "mask": mask_matrix(&layout.mask),
        "roles": layout.roles,
        "positions": layout.positions,
        "probabilities": trace.probs,
        "blocks": blocks,
    });
    Ok(dump(&doc))
}

/// Synthetic graph used by `gradcheck`: small enough that every coordinate
/// of every tensor can be perturbed.
fn gradcheck_data(seed: u64) -> Result<Dataset, CliError> {
    let spec = SyntheticSpec {
        entities: 20,
        background_relations: 2,
        fewshot_relations: 3,
        triples_per_relation: 4,
        background_degree: 2,
        candidates: 8,
        seed,
        ..SyntheticSpec::default()
    };
    Ok(Dataset::from_synthetic(generate_synthetic_kg(&spec)?, 50, seed)?)
}

pub struct GradCheckOutcome {
    pub text: String,
    pub passed: bool,
}

pub fn gradcheck(cfg: &RunConfig, inject: Option<f64>) -> Result<GradCheckOutcome, CliError> {
    let mut config: ModelConfig = cfg.model_config()?;
    if config.d_e > GRADCHECK_MAX_DIM || config.layers > GRADCHECK_MAX_LAYERS {
        return Err(CliError::Config(format!(
            "gradcheck needs d_e <= {GRADCHECK_MAX_DIM} and layers <= {GRADCHECK_MAX_LAYERS}, got d_e={} layers={}",
            config.d_e, config.layers
        )));
    }
    config.dropout = 0.0;
    let data = gradcheck_data(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, store) = TransAm::init(config, data.graph.entity_count(), data.graph.relation_count(), &mut rng)?;
    let batch = sample_batch(&data, model.config.k, 2, 1, &mut rng)?;
    let opts = GradCheckOptions {
        seed: cfg.seed,
        perturb_analytic: inject,
        ..GradCheckOptions::default()
    };
    let loss = |s: &ParamStore, tape: &mut transam::Tape| {
        let mut bound = model.bind(tape, s)?;
        bound.batch_loss(tape, s, &data.neighbors, &batch, None)
    };
    let report = gradient_check(loss, &store, &opts)?;
    let passed = report.max_rel_error <= GRADCHECK_TOLERANCE;
    let mut text = format!(
        "max relative error {:.3e} over {} coordinates ({})\n",
        report.max_rel_error,
        report.checked,
        if passed { "ok" } else { "FAILED" }
    );
    text.push_str("worst coordinate per tensor:\n");
    for e in report.offenders().iter().take(10) {
        text.push_str(&format!(
            "  {:<24} [{:>4}] analytic {:+.6e} numeric {:+.6e} rel {:.3e}\n",
            e.name, e.index, e.analytic, e.numeric, e.rel_error
        ));
    }
    Ok(GradCheckOutcome { text, passed })
}
