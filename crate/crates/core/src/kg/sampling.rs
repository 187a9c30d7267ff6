//! Episode construction, tail corruption and candidate pools.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{EntityId, Graph, RelationId, Triple};
use super::tasks::{CandidateSet, TrueTails};
use crate::error::{Error, Result};

pub type Pair = (EntityId, EntityId);

/// One few-shot task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub relation: RelationId,
    pub support: Vec<Pair>,
    pub query_pos: Pair,
    pub query_neg: Vec<Pair>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }
}

/// Draws a tail from `candidates` that is not a known true tail.
pub fn corrupt_tail<R: Rng + ?Sized>(
    query: Pair,
    candidates: &[EntityId],
    true_tails: &HashSet<EntityId>,
    rng: &mut R,
) -> Result<Pair> {
    let feasible: Vec<EntityId> = candidates.iter().copied().filter(|c| !true_tails.contains(c)).collect();
    if feasible.is_empty() {
        return Err(Error::NoNegative { head: query.0 });
    }
    Ok((query.0, feasible[rng.gen_range(0..feasible.len())]))
}

/// Samples `k` support pairs and one positive query from `triples`, plus
/// `negatives_per_query` tail-corrupted negatives.
pub fn sample_episode<R: Rng + ?Sized>(
    triples: &[Triple],
    relation: RelationId,
    k: usize,
    negatives_per_query: usize,
    candidates: &CandidateSet,
    true_tails: &TrueTails,
    rng: &mut R,
) -> Result<Episode> {
    if triples.len() < k + 1 {
        return Err(Error::TooFewTriples {
            relation: relation.to_string(),
            available: triples.len(),
            needed: k + 1,
        });
    }
    if candidates.tails.is_empty() {
        return Err(Error::NoNegative { head: usize::MAX });
    }
    let picks = sample(rng, triples.len(), k + 1).into_vec();
    let support: Vec<Pair> = picks[..k].iter().map(|&i| triples[i].pair()).collect();
    let query_pos = triples[picks[k]].pair();
    let known = true_tails.get(query_pos.0, relation);
    let query_neg = (0..negatives_per_query)
        .map(|_| corrupt_tail(query_pos, &candidates.tails, known, rng))
        .collect::<Result<_>>()?;
    Ok(Episode {
        relation,
        support,
        query_pos,
        query_neg,
    })
}

/// Candidate pool containing every gold tail of `triples` plus uniformly
/// sampled distractors, up to `max_candidates` entries.
pub fn candidates_for_relation<R: Rng + ?Sized>(
    graph: &Graph,
    triples: &[Triple],
    relation: RelationId,
    max_candidates: usize,
    rng: &mut R,
) -> CandidateSet {
    let mut seen = HashSet::new();
    let mut tails: Vec<EntityId> = triples.iter().map(|t| t.tail).filter(|&t| seen.insert(t)).collect();
    if max_candidates < tails.len() {
        log::warn!(
            "relation {}: max_candidates {max_candidates} is below its {} gold tails; keeping all golds",
            graph.relation_name(relation),
            tails.len()
        );
    } else {
        let pool: Vec<EntityId> = (0..graph.entity_count()).filter(|e| !seen.contains(e)).collect();
        let wanted = (max_candidates - tails.len()).min(pool.len());
        let mut extra: Vec<EntityId> = sample(rng, pool.len(), wanted).into_iter().map(|i| pool[i]).collect();
        extra.sort_unstable();
        tails.extend(extra);
    }
    CandidateSet { relation, tails }
}
