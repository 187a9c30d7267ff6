#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transam::kg::{build_neighbor_index, Graph, NeighborIndex, Triple};
use transam::model::{ModelConfig, QuerySequence, TransAm};
use transam::ParamStore;

/// Six entities, two relations, a few background edges; entity 5 is isolated.
pub fn tiny_graph() -> (Graph, NeighborIndex) {
    let mut g = Graph::new();
    for i in 0..6 {
        g.entities.intern(&format!("e{i}"));
    }
    g.relations.intern("r0");
    g.relations.intern("r1");
    for (h, r, t) in [
        (0, 0, 1),
        (0, 1, 2),
        (1, 1, 3),
        (2, 0, 0),
        (3, 0, 4),
        (3, 1, 1),
        (4, 0, 2),
    ] {
        g.add(Triple::new(h, r, t)).unwrap();
    }
    let idx = build_neighbor_index(&g, 50, 0);
    (g, idx)
}

pub fn tiny_model(d_e: usize, heads: usize, layers: usize, k: usize, seed: u64) -> (TransAm, ParamStore) {
    let mut cfg = ModelConfig::new(d_e, heads, layers, k);
    cfg.dropout = 0.0;
    cfg.ffn_hidden = 2 * d_e * heads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TransAm::init(cfg, 6, 2, &mut rng).unwrap()
}

/// Sequences over `tiny_graph` for K = 1, mixing labels and an isolated entity.
pub fn tiny_batch(cls: usize) -> Vec<QuerySequence> {
    vec![
        QuerySequence {
            entities: vec![cls, 0, 1, 3, 4],
            label: 1,
        },
        QuerySequence {
            entities: vec![cls, 0, 1, 3, 5],
            label: 0,
        },
    ]
}

/// Direct enumeration of the literal local-mask rule: row 0 and the
/// diagonal are open, `j = i + 1` for `i ∈ 1..=2K+1`, `j = i - 1` for
/// `i ∈ 2..=2K+2`.
pub fn literal_rule_open(k: usize, i: usize, j: usize) -> bool {
    i == 0
        || i == j
        || (j == i + 1 && (1..=2 * k + 1).contains(&i))
        || (i >= 1 && j == i - 1 && (2..=2 * k + 2).contains(&i))
}

/// Entries where the literal rule links neighboring pairs: `(2i, 2i+1)` and
/// `(2i+1, 2i)` for `i ∈ 1..=K`.
pub fn cross_pair_entries(k: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for i in 1..=k {
        v.push((2 * i, 2 * i + 1));
        v.push((2 * i + 1, 2 * i));
    }
    v.sort_unstable();
    v
}

/// Rank by sorting: position of the gold among candidates ordered by
/// descending score, with ties placed before the gold.
pub fn sorted_rank(scores: &[f64], gold: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| (a == gold).cmp(&(b == gold)))
    });
    order.iter().position(|&i| i == gold).unwrap() + 1
}

/// `(mrr, hits1, hits10)` from ranks, summed in rank order.
pub fn metric_oracle(ranks: &[usize]) -> (f64, f64, f64) {
    let n = ranks.len() as f64;
    let mut rr = 0.0;
    let (mut h1, mut h10) = (0usize, 0usize);
    for &r in ranks {
        rr += 1.0 / r as f64;
        h1 += usize::from(r == 1);
        h10 += usize::from(r <= 10);
    }
    (rr / n, h1 as f64 / n, h10 as f64 / n)
}

/// A smoke-sized synthetic dataset.
pub fn small_dataset() -> transam::kg::Dataset {
    let spec = transam::kg::SyntheticSpec {
        entities: 40,
        background_relations: 3,
        fewshot_relations: 6,
        triples_per_relation: 8,
        candidates: 20,
        ..transam::kg::SyntheticSpec::default()
    };
    transam::kg::Dataset::from_synthetic(transam::kg::generate_synthetic_kg(&spec).unwrap(), 50, 0).unwrap()
}

/// One episode of the first training relation: its positive query sequence
/// and a single fixed negative.
pub fn fixed_pair(data: &transam::kg::Dataset, k: usize, seed: u64) -> Vec<QuerySequence> {
    let (name, triples) = data.tasks.train.iter().next().unwrap();
    let rel = data.graph.relation_id(name).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep =
        transam::kg::sample_episode(triples, rel, k, 1, &data.candidates[name], &data.true_tails, &mut rng).unwrap();
    let cls = data.graph.entity_count();
    vec![
        transam::model::build_sequence(&ep, ep.query_pos, cls),
        transam::model::build_sequence(&ep, ep.query_neg[0], cls),
    ]
}

/// Trains on one fixed positive/negative pair; returns the loss trace.
pub fn overfit_trace(steps: u64, seed: u64) -> Vec<f64> {
    let data = small_dataset();
    let batch = fixed_pair(&data, 1, seed);
    let mut cfg = ModelConfig::new(8, 2, 2, 1);
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, store) = TransAm::init(cfg, data.graph.entity_count(), data.graph.relation_count(), &mut rng).unwrap();
    let mut tc = transam::train::TrainConfig::new(steps, 1e-3, 10);
    tc.seed = seed;
    let mut trainer = transam::train::Trainer::new(model, store, tc).unwrap();
    let mut losses: Vec<f64> = (0..steps).map(|_| trainer.step_on(&data, &batch).unwrap()).collect();
    let mut tape = transam::Tape::new();
    let mut bound = trainer.model.bind(&mut tape, &trainer.store).unwrap();
    let last = bound
        .batch_loss(&mut tape, &trainer.store, &data.neighbors, &batch, None)
        .unwrap();
    losses.push(tape.value(last).item());
    losses
}

/// Scores a sequence by a fixed random table over its query pair, drawing
/// from a few levels so ties are common.
pub struct TableScorer {
    pub seed: u64,
    pub levels: u64,
}

impl transam::eval::Scorer for TableScorer {
    fn score(&self, seqs: &[QuerySequence]) -> transam::Result<Vec<f64>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let n = s.entities.len();
                let key = (s.entities[n - 2] as u64) << 32 | s.entities[n - 1] as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                rand::Rng::gen_range(&mut rng, 0..self.levels) as f64 / self.levels as f64
            })
            .collect())
    }
}

/// Checks an evaluation against the sort oracle: every dumped rank, every
/// per-relation metric and the aggregate, with exact equality.
pub fn assert_matches_oracle(eval: &transam::eval::Evaluation) {
    use std::collections::BTreeMap;
    let mut by_rel: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut all = Vec::new();
    for q in &eval.queries {
        let gold_at = q
            .candidates
            .iter()
            .position(|&c| c == q.gold)
            .expect("gold among candidates");
        let r = sorted_rank(&q.scores, gold_at);
        assert_eq!(q.rank, r, "{} ({}, {})", q.relation, q.head, q.gold);
        by_rel.entry(&q.relation).or_default().push(r);
        all.push(r);
    }
    let check = |m: &transam::eval::Metrics, ranks: &[usize]| {
        let (mrr, h1, h10) = metric_oracle(ranks);
        assert_eq!((m.mrr, m.hits1, m.hits10, m.queries), (mrr, h1, h10, ranks.len()));
    };
    check(&eval.report.aggregate, &all);
    assert_eq!(eval.report.per_relation.len(), by_rel.len());
    for (name, ranks) in by_rel {
        check(&eval.report.per_relation[name], &ranks);
    }
}
