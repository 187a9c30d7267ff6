use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("function is not deterministic: two baseline evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("task for relation `{relation}` lists a triple with relation `{found}`")]
    RelationMismatch { relation: String, found: String },

    #[error("relation {relation} has {available} triples, need at least {needed}")]
    TooFewTriples {
        relation: String,
        available: usize,
        needed: usize,
    },

    #[error("no valid negative tail for head {head}")]
    NoNegative { head: usize },

    #[error("gold tail {0} is not among the candidates")]
    GoldMissing(usize),

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: usize },

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("bad magic in checkpoint")]
    BadMagic,

    #[error("checkpoint truncated")]
    Truncated,

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("length mismatch in {op}: {left} vs {right}")]
    Length {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
