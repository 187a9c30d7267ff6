use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{EntityId, Graph, RelationId};

/// Outgoing `(relation, tail)` pairs of every entity in the background graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    lists: Vec<Vec<(RelationId, EntityId)>>,
    max_neighbors: usize,
}

impl NeighborIndex {
    /// Neighbors of `e`; empty for isolated or out-of-vocabulary ids.
    pub fn neighbors(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        self.lists.get(e).map_or(&[], Vec::as_slice)
    }

    pub fn entity_count(&self) -> usize {
        self.lists.len()
    }

    pub fn max_neighbors(&self) -> usize {
        self.max_neighbors
    }
}

fn entity_seed(seed: u64, e: EntityId) -> u64 {
    seed ^ (e as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds the neighbor lists, capping each at `max_neighbors`.
///
/// Lists over the cap keep a uniform sample, drawn from a generator seeded per
/// entity so the result does not depend on iteration order. Kept neighbors
/// stay in insertion order.
pub fn build_neighbor_index(graph: &Graph, max_neighbors: usize, seed: u64) -> NeighborIndex {
    let max_neighbors = max_neighbors.max(1);
    let mut lists = vec![Vec::new(); graph.entity_count()];
    for t in graph.background() {
        lists[t.head].push((t.relation, t.tail));
    }
    for (e, list) in lists.iter_mut().enumerate() {
        if list.len() > max_neighbors {
            let mut rng = ChaCha8Rng::seed_from_u64(entity_seed(seed, e));
            let mut keep = sample(&mut rng, list.len(), max_neighbors).into_vec();
            keep.sort_unstable();
            *list = keep.into_iter().map(|i| list[i]).collect();
        }
    }
    NeighborIndex { lists, max_neighbors }
}
