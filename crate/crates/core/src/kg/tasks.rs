use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{EntityId, Graph, RelationId, Triple};
use crate::error::{Error, Result};

/// Few-shot relation name → its triples, in file order.
pub type Tasks = BTreeMap<String, Vec<Triple>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskSplits {
    pub train: Tasks,
    pub valid: Tasks,
    pub test: Tasks,
}

impl TaskSplits {
    pub fn all(&self) -> impl Iterator<Item = (&String, &Vec<Triple>)> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Loads a JSON object mapping relation name → `[[head, relation, tail], ...]`.
///
/// Names are interned into `graph`'s vocabularies. Repeated triples within a
/// relation are dropped.
pub fn load_tasks(path: impl AsRef<Path>, graph: &mut Graph) -> Result<Tasks> {
    let text = fs::read_to_string(path)?;
    parse_tasks(&text, graph)
}

pub fn parse_tasks(text: &str, graph: &mut Graph) -> Result<Tasks> {
    let raw: BTreeMap<String, Vec<[String; 3]>> = serde_json::from_str(text)?;
    let mut tasks = Tasks::new();
    for (name, triples) in raw {
        let rel = graph.relations.intern(&name);
        let mut seen = HashSet::new();
        let mut list = Vec::with_capacity(triples.len());
        for [h, r, t] in triples {
            if r != name {
                return Err(Error::RelationMismatch {
                    relation: name,
                    found: r,
                });
            }
            let triple = Triple::new(graph.entities.intern(&h), rel, graph.entities.intern(&t));
            if seen.insert(triple) {
                list.push(triple);
            }
        }
        tasks.insert(name, list);
    }
    Ok(tasks)
}

pub fn tasks_to_json(tasks: &Tasks, graph: &Graph) -> String {
    let raw: BTreeMap<&str, Vec<[&str; 3]>> = tasks
        .iter()
        .map(|(name, triples)| {
            let list = triples
                .iter()
                .map(|t| [graph.entity_name(t.head), name.as_str(), graph.entity_name(t.tail)])
                .collect();
            (name.as_str(), list)
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("string maps serialize")
}

pub fn write_tasks(tasks: &Tasks, graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tasks_to_json(tasks, graph))?;
    Ok(())
}

/// Candidate tails used to rank and to draw negatives for one relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub relation: RelationId,
    pub tails: Vec<EntityId>,
}

pub type Candidates = BTreeMap<String, CandidateSet>;

/// Loads a JSON object mapping relation name → array of candidate entity names.
pub fn load_candidates(path: impl AsRef<Path>, graph: &mut Graph) -> Result<Candidates> {
    let text = fs::read_to_string(path)?;
    parse_candidates(&text, graph)
}

pub fn parse_candidates(text: &str, graph: &mut Graph) -> Result<Candidates> {
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
    Ok(raw
        .into_iter()
        .map(|(name, ents)| {
            let relation = graph.relations.intern(&name);
            let mut seen = HashSet::new();
            let tails = ents
                .iter()
                .map(|e| graph.entities.intern(e))
                .filter(|&e| seen.insert(e))
                .collect();
            (name, CandidateSet { relation, tails })
        })
        .collect())
}

pub fn candidates_to_json(candidates: &Candidates, graph: &Graph) -> String {
    let raw: BTreeMap<&str, Vec<&str>> = candidates
        .iter()
        .map(|(name, c)| (name.as_str(), c.tails.iter().map(|&e| graph.entity_name(e)).collect()))
        .collect();
    serde_json::to_string_pretty(&raw).expect("string maps serialize")
}

/// Every known tail for each `(head, relation)`, from the background graph
/// and any number of task maps.
#[derive(Debug, Clone, Default)]
pub struct TrueTails {
    map: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

static EMPTY: std::sync::LazyLock<HashSet<EntityId>> = std::sync::LazyLock::new(HashSet::new);

impl TrueTails {
    pub fn new<'a>(graph: &Graph, tasks: impl IntoIterator<Item = &'a Tasks>) -> Self {
        let mut s = Self::default();
        for t in graph.background() {
            s.insert(*t);
        }
        for map in tasks {
            for t in map.values().flatten() {
                s.insert(*t);
            }
        }
        s
    }

    pub fn insert(&mut self, t: Triple) {
        self.map.entry((t.head, t.relation)).or_default().insert(t.tail);
    }

    pub fn get(&self, head: EntityId, relation: RelationId) -> &HashSet<EntityId> {
        self.map.get(&(head, relation)).unwrap_or(&EMPTY)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.get(t.head, t.relation).contains(&t.tail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task() {
        let mut g = Graph::new();
        let tasks = parse_tasks(r#"{"r1": [["a","r1","b"]]}"#, &mut g).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks["r1"].len(), 1);
        assert_eq!(g.entity_count(), 2);
    }

    #[test]
    fn empty_tasks() {
        let mut g = Graph::new();
        assert!(parse_tasks("{}", &mut g).unwrap().is_empty());
    }

    #[test]
    fn mismatched_relation() {
        let mut g = Graph::new();
        let err = parse_tasks(r#"{"r1": [["a","r2","b"]]}"#, &mut g).unwrap_err();
        assert!(err.to_string().contains("r1"), "{err}");
    }

    #[test]
    fn json_roundtrip() {
        let mut g = Graph::new();
        let text = r#"{"r1": [["a","r1","b"], ["c","r1","a"]], "r2": [["b","r2","b"]]}"#;
        let tasks = parse_tasks(text, &mut g).unwrap();
        let again = parse_tasks(&tasks_to_json(&tasks, &g), &mut g).unwrap();
        assert_eq!(tasks, again);
    }

    #[test]
    fn true_tails_merge_sources() {
        let mut g = Graph::new();
        g.add_named("a", "r1", "b");
        let tasks = parse_tasks(r#"{"r1": [["a","r1","c"]]}"#, &mut g).unwrap();
        let tt = TrueTails::new(&g, [&tasks]);
        let (a, r1) = (g.entity_id("a").unwrap(), g.relation_id("r1").unwrap());
        assert_eq!(tt.get(a, r1).len(), 2);
        assert!(tt.get(99, r1).is_empty());
    }
}
