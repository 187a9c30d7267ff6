//! Everything training and evaluation read: graph, task splits, candidate
//! pools, known-true tails and the neighbor index.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::neighbors::{build_neighbor_index, NeighborIndex};
use super::sampling::candidates_for_relation;
use super::synthetic::SyntheticKg;
use super::tasks::{Candidates, TaskSplits, Tasks, TrueTails};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    pub tasks: TaskSplits,
    pub candidates: Candidates,
    pub true_tails: TrueTails,
    pub neighbors: NeighborIndex,
}

impl Dataset {
    /// Assembles a dataset. Relations without a candidate pool get one of
    /// `max_candidates` entries drawn with `seed`.
    pub fn new(
        graph: Graph,
        tasks: TaskSplits,
        mut candidates: Candidates,
        max_neighbors: usize,
        max_candidates: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, triples) in tasks.all() {
            if !candidates.contains_key(name) {
                let rel = graph.relation_id(name)?;
                let set = candidates_for_relation(&graph, triples, rel, max_candidates, &mut rng);
                candidates.insert(name.clone(), set);
            }
        }
        let true_tails = TrueTails::new(&graph, [&tasks.train, &tasks.valid, &tasks.test]);
        let neighbors = build_neighbor_index(&graph, max_neighbors, seed);
        Ok(Self {
            graph,
            tasks,
            candidates,
            true_tails,
            neighbors,
        })
    }

    pub fn from_synthetic(kg: SyntheticKg, max_neighbors: usize, seed: u64) -> Result<Self> {
        Self::new(kg.graph, kg.tasks, kg.candidates, max_neighbors, usize::MAX, seed)
    }

    pub fn split(&self, split: Split) -> &Tasks {
        match split {
            Split::Train => &self.tasks.train,
            Split::Valid => &self.tasks.valid,
            Split::Test => &self.tasks.test,
        }
    }
}
