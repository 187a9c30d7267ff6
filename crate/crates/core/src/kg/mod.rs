//! Knowledge-graph data: background graph, few-shot tasks, sampling and loaders.

pub mod dataset;
pub mod embeddings;
pub mod graph;
pub mod neighbors;
pub mod sampling;
pub mod synthetic;
pub mod tasks;

pub use dataset::{Dataset, Split};
pub use embeddings::{load_pretrained, PretrainedEmbeddings};
pub use graph::{load_triples, write_triples, EntityId, Graph, LoadedGraph, RelationId, Triple, Vocab};
pub use neighbors::{build_neighbor_index, NeighborIndex};
pub use sampling::{candidates_for_relation, corrupt_tail, sample_episode, Episode, Pair};
pub use synthetic::{generate_synthetic_kg, pattern_holds, Pattern, PatternMix, SyntheticKg, SyntheticSpec};
pub use tasks::{
    candidates_to_json, load_candidates, load_tasks, parse_candidates, parse_tasks, tasks_to_json, write_tasks,
    CandidateSet, Candidates, TaskSplits, Tasks, TrueTails,
};
