//! Transformer matcher with local-global attention for one-shot knowledge
//! graph relation learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`optim`], [`gradcheck`]: dense `f64` math with
//!   reverse-mode differentiation, Adam, and the learning-rate schedule.
//! - [`kg`]: graphs, neighbor indices, few-shot tasks, episode sampling,
//!   loaders and a synthetic graph generator.
//! - [`encoder`]: the neighbor-attention entity encoder.
//! - [`model`]: sequence construction, local/global attention blocks and the
//!   prediction head.
//! - [`train`], [`eval`], [`checkpoint`]: episodic training, ranking
//!   metrics and persistence.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kg;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
