use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }

    pub fn pair(&self) -> (EntityId, EntityId) {
        (self.head, self.tail)
    }
}

/// Bidirectional name ↔ dense id map. Ids follow first-insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Background knowledge graph plus the entity and relation vocabularies.
///
/// The vocabularies may also hold names that only occur in few-shot tasks or
/// candidate lists; those entities simply have no background triples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Graph {
    pub entities: Vocab,
    pub relations: Vocab,
    background: Vec<Triple>,
    present: HashSet<Triple>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn background(&self) -> &[Triple] {
        &self.background
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.present.contains(t)
    }

    /// Adds a background triple; returns `false` if it was already present.
    pub fn add(&mut self, t: Triple) -> Result<bool> {
        if t.head >= self.entity_count() || t.tail >= self.entity_count() {
            return Err(Error::UnknownId {
                kind: "entity",
                id: t.head.max(t.tail),
            });
        }
        if t.relation >= self.relation_count() {
            return Err(Error::UnknownId {
                kind: "relation",
                id: t.relation,
            });
        }
        if !self.present.insert(t) {
            return Ok(false);
        }
        self.background.push(t);
        Ok(true)
    }

    pub fn add_named(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let t = Triple::new(
            self.entities.intern(head),
            self.relations.intern(relation),
            self.entities.intern(tail),
        );
        self.add(t).expect("interned ids are valid")
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id).unwrap_or("?")
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id).unwrap_or("?")
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId> {
        self.entities.get(name).ok_or_else(|| Error::UnknownName {
            kind: "entity",
            name: name.to_string(),
        })
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationId> {
        self.relations.get(name).ok_or_else(|| Error::UnknownName {
            kind: "relation",
            name: name.to_string(),
        })
    }

    /// Set of `(head, relation, tail)` name triples, independent of id assignment.
    pub fn named_triples(&self) -> HashSet<(String, String, String)> {
        self.background
            .iter()
            .map(|t| {
                (
                    self.entity_name(t.head).to_string(),
                    self.relation_name(t.relation).to_string(),
                    self.entity_name(t.tail).to_string(),
                )
            })
            .collect()
    }
}

/// Result of [`load_triples`].
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: Graph,
    pub duplicates: usize,
}

/// Reads `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
pub fn load_triples(path: impl AsRef<Path>) -> Result<LoadedGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_triples(&text, path)
}

pub(crate) fn parse_triples(text: &str, path: &Path) -> Result<LoadedGraph> {
    let mut graph = Graph::new();
    let mut duplicates = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if !graph.add_named(fields[0], fields[1], fields[2]) {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::info!("{}: dropped {duplicates} duplicate triples", path.display());
    }
    Ok(LoadedGraph { graph, duplicates })
}

pub fn write_triples(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for t in graph.background() {
        writeln!(
            out,
            "{}\t{}\t{}",
            graph.entity_name(t.head),
            graph.relation_name(t.relation),
            graph.entity_name(t.tail)
        )?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LoadedGraph> {
        parse_triples(text, Path::new("mem"))
    }

    #[test]
    fn duplicate_line_dropped() {
        let g = parse("a\tr\tb\na\tr\tb\n").unwrap();
        assert_eq!(g.graph.background().len(), 1);
        assert_eq!(g.duplicates, 1);
    }

    #[test]
    fn empty_file() {
        let g = parse("").unwrap();
        assert_eq!(g.graph.entity_count(), 0);
        assert!(g.graph.background().is_empty());
    }

    #[test]
    fn ids_by_first_appearance() {
        let text = "b\tr1\ta\na\tr2\tc\nc\tr1\td\nd\tr2\tb\nb\tr2\tc\n";
        let g = parse(text).unwrap().graph;
        assert_eq!(g.entity_count(), 4);
        assert_eq!(g.background().len(), 5);
        for (name, id) in [("b", 0), ("a", 1), ("c", 2), ("d", 3)] {
            assert_eq!(g.entity_id(name).unwrap(), id);
        }
        assert_eq!(g.relation_id("r2").unwrap(), 1);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse("a\tr\tb\n\nbad line\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        assert!(parse("a\tr\t\n").is_err());
    }
}
