//! Filtered ranking evaluation: MRR and Hits@N with pessimistic ties.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Dataset, EntityId, Episode, NeighborIndex, Pair, Tasks, Triple};
use crate::model::{build_sequence, QuerySequence, TransAm};
use crate::params::ParamStore;

/// Anything that maps query sequences to plausibility scores.
pub trait Scorer: Sync {
    fn score(&self, seqs: &[QuerySequence]) -> Result<Vec<f64>>;
}

/// Scores with a trained model in evaluation mode.
pub struct ModelScorer<'a> {
    pub model: &'a TransAm,
    pub store: &'a ParamStore,
    pub neighbors: &'a NeighborIndex,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, seqs: &[QuerySequence]) -> Result<Vec<f64>> {
        self.model.score(self.store, self.neighbors, seqs)
    }
}

/// `1 +` the number of other entries scoring at least as high as `scores[gold]`.
pub fn pessimistic_rank(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores.iter().enumerate().filter(|&(i, &s)| i != gold && s >= g).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub relation: String,
    pub head: EntityId,
    pub gold: EntityId,
    pub candidates: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub rank: usize,
}

/// Scores every candidate tail for the episode's positive query and ranks
/// the gold tail among them.
pub fn rank_query<S: Scorer + ?Sized>(
    scorer: &S,
    episode: &Episode,
    candidates: &[EntityId],
    cls: EntityId,
) -> Result<(usize, Vec<f64>)> {
    let (head, gold) = episode.query_pos;
    let gold_at = candidates
        .iter()
        .position(|&c| c == gold)
        .ok_or(Error::GoldMissing(gold))?;
    let seqs: Vec<QuerySequence> = candidates
        .iter()
        .map(|&c| build_sequence(episode, (head, c), cls))
        .collect();
    let scores = scorer.score(&seqs)?;
    if scores.len() != candidates.len() {
        return Err(Error::Length {
            op: "rank_query",
            left: scores.len(),
            right: candidates.len(),
        });
    }
    Ok((pessimistic_rank(&scores, gold_at), scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        Self {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
            hits10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
            queries: ranks.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingReport {
    pub aggregate: Metrics,
    pub per_relation: BTreeMap<String, Metrics>,
}

impl RankingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: RankingReport,
    pub queries: Vec<QueryResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    /// Seed of the per-relation support selection.
    pub seed: u64,
    /// Restricts evaluation to these relation names.
    pub relations: Option<Vec<String>>,
    /// Worker threads; `None` reads `TRANSAM_THREADS`, falling back to the
    /// global pool.
    pub threads: Option<usize>,
}

impl EvalOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            relations: None,
            threads: None,
        }
    }
}

fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Fixed support pairs of a relation and its remaining query triples.
pub fn split_support(name: &str, triples: &[Triple], k: usize, seed: u64) -> Result<(Vec<Pair>, Vec<Triple>)> {
    if triples.len() < k + 1 {
        return Err(Error::TooFewTriples {
            relation: name.to_string(),
            available: triples.len(),
            needed: k + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(name));
    let mut picks = sample(&mut rng, triples.len(), k).into_vec();
    picks.sort_unstable();
    let support = picks.iter().map(|&i| triples[i].pair()).collect();
    let queries = triples
        .iter()
        .enumerate()
        .filter(|(i, _)| picks.binary_search(i).is_err())
        .map(|(_, t)| *t)
        .collect();
    Ok((support, queries))
}

/// Candidate tails for `query` with every other known-true tail removed;
/// the gold tail is always present.
pub fn filtered_candidates(data: &Dataset, pool: &[EntityId], query: &Triple) -> Vec<EntityId> {
    let known = data.true_tails.get(query.head, query.relation);
    let mut out: Vec<EntityId> = pool
        .iter()
        .copied()
        .filter(|&c| c == query.tail || !known.contains(&c))
        .collect();
    if !out.contains(&query.tail) {
        out.push(query.tail);
    }
    out
}

fn thread_count(opts: &EvalOptions) -> Option<usize> {
    opts.threads.or_else(|| {
        std::env::var("TRANSAM_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n: &usize| n > 0)
    })
}

/// Ranks every query triple of `tasks` against its filtered candidates.
///
/// Supports are chosen once per relation from `opts.seed`, so repeated calls
/// are deterministic. The aggregate is a micro-average over queries.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    data: &Dataset,
    tasks: &Tasks,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let cls = data.graph.entity_count();
    let mut work = Vec::new();
    for (name, triples) in tasks {
        if let Some(keep) = &opts.relations {
            if !keep.contains(name) {
                continue;
            }
        }
        let pool = data.candidates.get(name).ok_or_else(|| Error::UnknownName {
            kind: "candidate set",
            name: name.clone(),
        })?;
        let (support, queries) = split_support(name, triples, opts.k, opts.seed)?;
        for q in queries {
            let episode = Episode {
                relation: q.relation,
                support: support.clone(),
                query_pos: q.pair(),
                query_neg: Vec::new(),
            };
            work.push((name, episode, filtered_candidates(data, &pool.tails, &q)));
        }
    }
    if let Some(keep) = &opts.relations {
        if let Some(missing) = keep.iter().find(|r| !tasks.contains_key(*r)) {
            return Err(Error::UnknownName {
                kind: "relation",
                name: missing.clone(),
            });
        }
    }

    let run = || {
        work.par_iter()
            .map(|(name, episode, cands)| {
                let (rank, scores) = rank_query(scorer, episode, cands, cls)?;
                Ok(QueryResult {
                    relation: (*name).clone(),
                    head: episode.query_pos.0,
                    gold: episode.query_pos.1,
                    candidates: cands.clone(),
                    scores,
                    rank,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    let queries = match thread_count(opts) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(Evaluation {
        report: report_from_queries(&queries),
        queries,
    })
}

pub fn report_from_queries(queries: &[QueryResult]) -> RankingReport {
    let mut by_rel: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for q in queries {
        by_rel.entry(q.relation.clone()).or_default().push(q.rank);
    }
    let all: Vec<usize> = queries.iter().map(|q| q.rank).collect();
    RankingReport {
        aggregate: Metrics::from_ranks(&all),
        per_relation: by_rel
            .iter()
            .map(|(k, r)| (k.clone(), Metrics::from_ranks(r)))
            .collect(),
    }
}

/// Evaluates a model on `tasks`.
pub fn evaluate_model(
    model: &TransAm,
    store: &ParamStore,
    data: &Dataset,
    tasks: &Tasks,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let scorer = ModelScorer {
        model,
        store,
        neighbors: &data.neighbors,
    };
    evaluate(&scorer, data, tasks, opts)
}

/// CSV `step,loss,lr` of a loss trace.
pub fn loss_csv(trace: &[crate::train::LossRecord]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl Scorer for Fixed {
        fn score(&self, seqs: &[QuerySequence]) -> Result<Vec<f64>> {
            Ok(self.0[..seqs.len()].to_vec())
        }
    }

    fn episode(gold: EntityId) -> Episode {
        Episode {
            relation: 0,
            support: vec![(1, 2)],
            query_pos: (3, gold),
            query_neg: vec![],
        }
    }

    #[test]
    fn unique_best_is_rank_one() {
        let s = Fixed(vec![0.1, 0.9, 0.3]);
        assert_eq!(rank_query(&s, &episode(5), &[4, 5, 6], 99).unwrap().0, 1);
    }

    #[test]
    fn all_tied_is_last() {
        let s = Fixed(vec![0.5; 10]);
        let cands: Vec<EntityId> = (10..20).collect();
        assert_eq!(rank_query(&s, &episode(13), &cands, 99).unwrap().0, 10);
    }

    #[test]
    fn gold_missing_errors() {
        let s = Fixed(vec![0.5; 3]);
        assert!(matches!(
            rank_query(&s, &episode(9), &[4, 5, 6], 99),
            Err(Error::GoldMissing(9))
        ));
    }

    #[test]
    fn metrics_closed_form() {
        let m = Metrics::from_ranks(&[1, 2, 4]);
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-15);
        assert!((m.hits1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits10, 1.0);
        assert_eq!(m.queries, 3);
        let p = Metrics::from_ranks(&[1, 1, 1]);
        assert_eq!((p.mrr, p.hits1, p.hits10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn support_split_is_stable() {
        let triples: Vec<Triple> = (0..10).map(|i| Triple::new(i, 0, i + 100)).collect();
        let a = split_support("r", &triples, 1, 3).unwrap();
        let b = split_support("r", &triples, 1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 9);
        assert!(!a.1.iter().any(|t| t.pair() == a.0[0]));
        assert!(split_support("r", &triples[..1], 1, 3).is_err());
    }
}
