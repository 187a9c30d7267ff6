//! Serialization of an episode into an entity sequence, and the per-slot
//! structure the attention layers need: local mask, rotary roles and triple
//! positions.
//!
//! Slot layout for `K` support pairs: `[CLS, h_1, t_1, …, h_K, t_K, h_q, t_q]`,
//! length `2K + 3`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, Episode, Pair};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySequence {
    pub entities: Vec<EntityId>,
    pub label: u8,
}

impl QuerySequence {
    pub fn k(&self) -> usize {
        (self.entities.len() - 3) / 2
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

pub fn sequence_len(k: usize) -> usize {
    2 * k + 3
}

/// Serializes `episode`'s support pairs followed by `query`.
///
/// The label is 1 when `query` is the episode's positive pair.
pub fn build_sequence(episode: &Episode, query: Pair, cls: EntityId) -> QuerySequence {
    let mut entities = Vec::with_capacity(sequence_len(episode.k()));
    entities.push(cls);
    for &(h, t) in &episode.support {
        entities.push(h);
        entities.push(t);
    }
    entities.push(query.0);
    entities.push(query.1);
    QuerySequence {
        entities,
        label: u8::from(query == episode.query_pos),
    }
}

/// How the intra-triple attention mask is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Band rule: CLS row open, each slot sees itself and its immediate
    /// neighbors within the entity span. Lets `t_i` see `h_{i+1}`.
    #[default]
    Literal,
    /// Each entity sees only itself and its pair partner; CLS row open.
    Block,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "block" => Ok(Self::Block),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Literal => "literal",
            MaskMode::Block => "block",
        })
    }
}

/// Pair partner of entity slot `i ≥ 1`.
fn partner(i: usize) -> usize {
    if i % 2 == 1 {
        i + 1
    } else {
        i - 1
    }
}

/// Whether slot `i` may attend to slot `j` locally.
pub fn local_allowed(k: usize, mode: MaskMode, i: usize, j: usize) -> bool {
    let last = 2 * k + 2;
    if i == 0 || i == j {
        return true;
    }
    match mode {
        MaskMode::Literal => (j == i + 1 && (1..=2 * k + 1).contains(&i)) || (j + 1 == i && (2..=last).contains(&i)),
        MaskMode::Block => j == partner(i),
    }
}

/// `(2K+3)×(2K+3)` additive mask with entries `0` (allowed) or `-inf`.
pub fn local_mask(k: usize, mode: MaskMode) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    let n = sequence_len(k);
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(if local_allowed(k, mode, i, j) {
                0.0
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    Tensor::new(vec![n, n], data)
}

/// Rotary role of a sequence slot: 0 for CLS, 1 for heads, 2 for tails.
pub fn role_index(position: usize) -> usize {
    match position {
        0 => 0,
        p if p % 2 == 1 => 1,
        _ => 2,
    }
}

pub fn roles(k: usize) -> Vec<usize> {
    (0..sequence_len(k)).map(role_index).collect()
}

/// Triple position of each slot: CLS 0, support pair `i` → `i`, query `K+1`.
pub fn global_positions(k: usize) -> Vec<usize> {
    let mut p = Vec::with_capacity(sequence_len(k));
    p.push(0);
    for i in 1..=k + 1 {
        p.push(i);
        p.push(i);
    }
    p
}
