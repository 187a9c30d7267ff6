//! Deterministic synthetic knowledge graphs with planted relation patterns.
//!
//! Every entity gets `background_degree` random outgoing background edges.
//! Each few-shot relation is then tied to a carrier background relation:
//!
//! - symmetric: pairs `{a, c}` yield task triples in both directions and the
//!   background edge `(a, carrier, c)`;
//! - inverse: task triple `(h, r, t)` comes with background edge
//!   `(t, carrier, h)`;
//! - anti-symmetric: task triple `(h, r, t)` with `(t, r, h)` absent and
//!   background edge `(h, carrier, t)`.
//!
//! Every true pair is therefore adjacent in the background graph, which is the
//! signal a matcher can pick up from neighbor-enhanced entity features.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{EntityId, Graph, Triple};
use super::sampling::candidates_for_relation;
use super::tasks::{Candidates, TaskSplits, Tasks};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Symmetric,
    Inverse,
    Antisymmetric,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Symmetric => "symmetric",
            Pattern::Inverse => "inverse",
            Pattern::Antisymmetric => "antisymmetric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternMix {
    /// Cycles symmetric, inverse, anti-symmetric.
    #[default]
    Mixed,
    Symmetric,
    Inverse,
    Antisymmetric,
}

impl PatternMix {
    pub fn pattern_for(self, index: usize) -> Pattern {
        match self {
            PatternMix::Mixed => [Pattern::Symmetric, Pattern::Inverse, Pattern::Antisymmetric][index % 3],
            PatternMix::Symmetric => Pattern::Symmetric,
            PatternMix::Inverse => Pattern::Inverse,
            PatternMix::Antisymmetric => Pattern::Antisymmetric,
        }
    }
}

impl FromStr for PatternMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Self::Mixed),
            "symmetric" | "symmetric-only" => Ok(Self::Symmetric),
            "inverse" | "inverse-only" => Ok(Self::Inverse),
            "antisymmetric" | "antisymmetric-only" => Ok(Self::Antisymmetric),
            other => Err(Error::Config(format!("unknown pattern mix `{other}`"))),
        }
    }
}

impl fmt::Display for PatternMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PatternMix::Mixed => "mixed",
            PatternMix::Symmetric => "symmetric",
            PatternMix::Inverse => "inverse",
            PatternMix::Antisymmetric => "antisymmetric",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub background_relations: usize,
    pub fewshot_relations: usize,
    pub pattern_mix: PatternMix,
    pub seed: u64,
    pub triples_per_relation: usize,
    pub background_degree: usize,
    pub candidates: usize,
    pub valid_relations: Option<usize>,
    pub test_relations: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            entities: 200,
            background_relations: 5,
            fewshot_relations: 12,
            pattern_mix: PatternMix::Mixed,
            seed: 7,
            triples_per_relation: 24,
            background_degree: 2,
            candidates: 50,
            valid_relations: None,
            test_relations: None,
        }
    }
}

impl SyntheticSpec {
    fn split_sizes(&self) -> (usize, usize) {
        let default = (self.fewshot_relations / 6).max(1);
        (
            self.valid_relations.unwrap_or(default),
            self.test_relations.unwrap_or(default),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::Infeasible(m));
        if self.entities < 20 {
            return infeasible(format!("need at least 20 entities, got {}", self.entities));
        }
        if self.fewshot_relations == 0 {
            return infeasible("need at least one few-shot relation".into());
        }
        if self.background_relations == 0 || self.background_degree == 0 {
            return infeasible("background graph would be empty".into());
        }
        if self.triples_per_relation < 2 {
            return infeasible("each few-shot relation needs at least 2 triples".into());
        }
        let pairs = self.entities * (self.entities - 1) / 2;
        if self.fewshot_relations * self.triples_per_relation > pairs {
            return infeasible(format!(
                "{} few-shot relations × {} triples exceed the {pairs} entity pairs",
                self.fewshot_relations, self.triples_per_relation
            ));
        }
        if self.background_degree >= self.entities / 2 {
            return infeasible("background degree too high for the entity count".into());
        }
        let (v, t) = self.split_sizes();
        if v + t >= self.fewshot_relations {
            return infeasible(format!(
                "{} few-shot relations leave none for training after {v} valid + {t} test",
                self.fewshot_relations
            ));
        }
        if self.candidates < 2 {
            return infeasible("candidate pools need at least 2 entries".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticKg {
    pub graph: Graph,
    pub tasks: TaskSplits,
    pub candidates: Candidates,
    pub patterns: BTreeMap<String, Pattern>,
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (EntityId, EntityId) {
    loop {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            return (a, b);
        }
    }
}

pub fn generate_synthetic_kg(spec: &SyntheticSpec) -> Result<SyntheticKg> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.entities;
    let mut graph = Graph::new();
    for i in 0..n {
        graph.entities.intern(&format!("e{i:04}"));
    }
    for b in 0..spec.background_relations {
        graph.relations.intern(&format!("bg{b}"));
    }

    for e in 0..n {
        let mut added = 0;
        while added < spec.background_degree {
            let b = rng.gen_range(0..spec.background_relations);
            let t = rng.gen_range(0..n);
            if t != e && graph.add(Triple::new(e, b, t))? {
                added += 1;
            }
        }
    }

    let mut all = Tasks::new();
    let mut patterns = BTreeMap::new();
    let mut order = Vec::new();
    for i in 0..spec.fewshot_relations {
        let pattern = spec.pattern_mix.pattern_for(i);
        let name = format!("fs{i:02}_{}", pattern.as_str());
        let rel = graph.relations.intern(&name);
        let carrier = i % spec.background_relations;
        let mut pairs: HashSet<(EntityId, EntityId)> = HashSet::new();
        let target = match pattern {
            Pattern::Symmetric => spec.triples_per_relation - spec.triples_per_relation % 2,
            _ => spec.triples_per_relation,
        };
        let mut triples = Vec::with_capacity(target);
        while triples.len() < target {
            let (a, c) = random_pair(&mut rng, n);
            if !pairs.insert((a, c)) || !pairs.insert((c, a)) {
                continue;
            }
            triples.push(Triple::new(a, rel, c));
            match pattern {
                Pattern::Symmetric => {
                    triples.push(Triple::new(c, rel, a));
                    graph.add(Triple::new(a, carrier, c))?;
                }
                Pattern::Inverse => {
                    graph.add(Triple::new(c, carrier, a))?;
                }
                Pattern::Antisymmetric => {
                    graph.add(Triple::new(a, carrier, c))?;
                }
            }
        }
        patterns.insert(name.clone(), pattern);
        order.push(name.clone());
        all.insert(name, triples);
    }

    let (n_valid, n_test) = spec.split_sizes();
    let n_train = spec.fewshot_relations - n_valid - n_test;
    let mut tasks = TaskSplits::default();
    for (i, name) in order.iter().enumerate() {
        let triples = all.remove(name).expect("inserted above");
        let split = if i < n_train {
            &mut tasks.train
        } else if i < n_train + n_valid {
            &mut tasks.valid
        } else {
            &mut tasks.test
        };
        split.insert(name.clone(), triples);
    }

    let mut candidates = Candidates::new();
    for name in &order {
        let triples = tasks
            .all()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v.clone())
            .expect("every relation is in a split");
        let rel = graph.relation_id(name)?;
        let set = candidates_for_relation(&graph, &triples, rel, spec.candidates, &mut rng);
        candidates.insert(name.clone(), set);
    }

    Ok(SyntheticKg {
        graph,
        tasks,
        candidates,
        patterns,
    })
}

/// Checks the planted pattern of one relation's triples against the graph.
pub fn pattern_holds(pattern: Pattern, triples: &[Triple], graph: &Graph) -> bool {
    let pairs: HashSet<(EntityId, EntityId)> = triples.iter().map(Triple::pair).collect();
    let adjacent = |h: EntityId, t: EntityId, forward: bool| {
        graph.background().iter().any(|b| {
            if forward {
                b.head == h && b.tail == t
            } else {
                b.head == t && b.tail == h
            }
        })
    };
    match pattern {
        Pattern::Symmetric => pairs.iter().all(|&(h, t)| pairs.contains(&(t, h))),
        Pattern::Antisymmetric => pairs.iter().all(|&(h, t)| !pairs.contains(&(t, h))),
        Pattern::Inverse => pairs.iter().all(|&(h, t)| adjacent(h, t, false)),
    }
}
