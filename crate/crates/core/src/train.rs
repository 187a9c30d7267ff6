//! Episodic training with Adam, a warmup/decay schedule, periodic validation
//! and early stopping.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOptions, RankingReport};
use crate::kg::{sample_episode, Dataset, Split};
use crate::model::{build_sequence, QuerySequence, TransAm};
use crate::optim::{adam_step, lr_at, AdamState, LrSchedule};
use crate::params::ParamStore;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_episodes: usize,
    pub negatives_per_positive: usize,
    pub schedule: LrSchedule,
    pub eval_every: u64,
    pub seed: u64,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    /// Keeps the entity and relation tables fixed, e.g. when they hold
    /// pretrained vectors.
    #[serde(default)]
    pub freeze_embeddings: bool,
}

impl TrainConfig {
    pub fn new(steps: u64, peak_rate: f64, warmup_steps: u64) -> Self {
        Self {
            steps,
            batch_episodes: 8,
            negatives_per_positive: 1,
            schedule: LrSchedule {
                peak_rate,
                warmup_steps,
                total_steps: steps,
            },
            eval_every: steps.max(1),
            seed: 0,
            patience: 10,
            freeze_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub report: RankingReport,
}

/// The generator for step `step`: independent of how many steps ran before,
/// so resumed runs draw the same batches as uninterrupted ones.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Samples one training batch: for each episode, the positive query and its
/// negatives.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &Dataset,
    k: usize,
    batch_episodes: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Vec<QuerySequence>> {
    let relations: Vec<(&String, _)> = data.tasks.train.iter().filter(|(_, t)| t.len() > k).collect();
    if relations.is_empty() {
        return Err(Error::Config(format!(
            "no training relation has at least {} triples",
            k + 1
        )));
    }
    let cls = data.graph.entity_count();
    let mut seqs = Vec::with_capacity(batch_episodes * (1 + negatives));
    for _ in 0..batch_episodes {
        let (name, triples) = relations[rng.gen_range(0..relations.len())];
        let rel = data.graph.relation_id(name)?;
        let cands = data.candidates.get(name).ok_or_else(|| Error::UnknownName {
            kind: "candidate set",
            name: name.clone(),
        })?;
        let ep = sample_episode(triples, rel, k, negatives, cands, &data.true_tails, rng)?;
        seqs.push(build_sequence(&ep, ep.query_pos, cls));
        for &neg in &ep.query_neg {
            seqs.push(build_sequence(&ep, neg, cls));
        }
    }
    Ok(seqs)
}

#[derive(Debug, Clone)]
pub struct Best {
    pub step: u64,
    pub mrr: f64,
    pub store: ParamStore,
}

pub struct Trainer {
    pub model: TransAm,
    pub store: ParamStore,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed updates.
    pub step: u64,
    pub trace: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<Best>,
    /// The batch of the most recent step, kept for diagnostics.
    pub last_batch: Vec<QuerySequence>,
    stale_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Finished,
    EarlyStopped,
}

impl Trainer {
    pub fn new(model: TransAm, store: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&store);
        Ok(Self {
            model,
            store,
            adam,
            config,
            step: 0,
            trace: Vec::new(),
            evals: Vec::new(),
            best: None,
            last_batch: Vec::new(),
            stale_evals: 0,
        })
    }

    /// Continues from a saved optimizer state and step counter.
    pub fn resume(model: TransAm, store: ParamStore, config: TrainConfig, adam: AdamState) -> Result<Self> {
        let mut t = Self::new(model, store, config)?;
        t.step = adam.step;
        t.adam = adam;
        Ok(t)
    }

    /// One update on `batch`. Returns the mean loss before the update.
    pub fn step_on(&mut self, data: &Dataset, batch: &[QuerySequence]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let next = self.step + 1;
        let mut rng = step_rng(self.config.seed ^ 0x5eed, next);
        let mut tape = Tape::new();
        let mut bound = self.model.bind(&mut tape, &self.store)?;
        self.last_batch = batch.to_vec();
        let loss = bound.batch_loss(&mut tape, &self.store, &data.neighbors, batch, Some(&mut rng))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at step {next}; batch: {}",
                serde_json::to_string(batch)?
            )));
        }
        self.store.zero_grad();
        tape.backward(loss, &mut self.store)?;
        if self.config.freeze_embeddings {
            for id in [self.model.encoder.entity, self.model.encoder.relation] {
                self.store.get_mut(id).grad = None;
            }
        }
        let lr = lr_at(&self.config.schedule, next);
        adam_step(&mut self.store, &mut self.adam, lr)?;
        self.step = next;
        self.trace.push(LossRecord {
            step: next,
            loss: value,
            lr,
        });
        Ok(value)
    }

    /// Samples a batch for the next step and trains on it.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        let mut rng = step_rng(self.config.seed, self.step + 1);
        let batch = sample_batch(
            data,
            self.model.config.k,
            self.config.batch_episodes,
            self.config.negatives_per_positive,
            &mut rng,
        )?;
        self.step_on(data, &batch)
    }

    /// Evaluates on `split`, tracking the best snapshot and patience.
    /// Returns true when patience is exhausted.
    pub fn validate(&mut self, data: &Dataset, split: Split) -> Result<bool> {
        let opts = EvalOptions::new(self.model.config.k, self.config.seed);
        let eval = evaluate_model(&self.model, &self.store, data, data.split(split), &opts)?;
        let mrr = eval.report.aggregate.mrr;
        log::info!(
            "step {}: {split} mrr {:.4} hits1 {:.4} hits10 {:.4}",
            self.step,
            mrr,
            eval.report.aggregate.hits1,
            eval.report.aggregate.hits10
        );
        self.evals.push(EvalRecord {
            step: self.step,
            report: eval.report,
        });
        if self.best.as_ref().is_none_or(|b| mrr > b.mrr) {
            self.best = Some(Best {
                step: self.step,
                mrr,
                store: self.store.clone(),
            });
            self.stale_evals = 0;
        } else {
            self.stale_evals += 1;
        }
        Ok(self.stale_evals >= self.config.patience)
    }

    /// Trains until `config.steps` updates are done or validation stalls.
    /// Validation runs every `eval_every` steps and after the last step when
    /// the split has any relation.
    pub fn run(&mut self, data: &Dataset, split: Split) -> Result<StopReason> {
        let has_valid = !data.split(split).is_empty();
        while self.step < self.config.steps {
            let loss = self.step(data)?;
            if self.step.is_multiple_of(100) {
                log::debug!("step {} loss {loss:.5}", self.step);
            }
            let due = self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps;
            if has_valid && due && self.validate(data, split)? {
                log::info!("early stop at step {}", self.step);
                return Ok(StopReason::EarlyStopped);
            }
        }
        Ok(StopReason::Finished)
    }

    /// The best validated parameters, or the current ones if never validated.
    pub fn best_store(&self) -> &ParamStore {
        self.best.as_ref().map_or(&self.store, |b| &b.store)
    }
}
