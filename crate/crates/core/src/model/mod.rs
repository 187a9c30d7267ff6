//! The matcher network: entity encoder → entry projection → `L` local-global
//! attention blocks → CLS prediction head.

pub mod attention;
pub mod block;
pub mod sequence;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    global_attention, global_scores, local_attention, local_scores, mha_combine, project, rotary_apply, AttentionOut,
    HeadParams, HeadVars, Projections,
};
pub use block::{transformer_block, BlockParams, BlockTrace, BlockVars, Dropout, SlotLayout, LN_EPS};
pub use sequence::{
    build_sequence, global_positions, local_allowed, local_mask, role_index, roles, sequence_len, MaskMode,
    QuerySequence,
};

use crate::encoder::{encoder_shapes, BoundEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::kg::NeighborIndex;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-head width; also the entity embedding width.
    pub d_e: usize,
    pub heads: usize,
    pub layers: usize,
    pub k: usize,
    pub theta_base: f64,
    pub mask_mode: MaskMode,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Defaults: rotary base 10000, literal mask, FFN width `4·H·d_e`, dropout 0.1.
    pub fn new(d_e: usize, heads: usize, layers: usize, k: usize) -> Self {
        Self {
            d_e,
            heads,
            layers,
            k,
            theta_base: 10_000.0,
            mask_mode: MaskMode::Literal,
            ffn_hidden: 4 * d_e * heads,
            dropout: 0.1,
        }
    }

    /// Model width `D = H·d_e`.
    pub fn width(&self) -> usize {
        self.heads * self.d_e
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_e == 0 || !self.d_e.is_multiple_of(2) {
            return bad(format!("d_e must be even and positive, got {}", self.d_e));
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.theta_base.is_nan() || self.theta_base <= 0.0 {
            return bad("theta_base must be > 0".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<SlotLayout> {
        Ok(SlotLayout {
            mask: local_mask(self.k, self.mask_mode)?,
            roles: roles(self.k),
            positions: global_positions(self.k),
        })
    }
}

/// Every tensor name and shape of a model, encoder included.
pub fn model_shapes(config: &ModelConfig, entity_count: usize, relation_count: usize) -> Vec<(String, Vec<usize>)> {
    let (d, w, f) = (config.d_e, config.width(), config.ffn_hidden);
    let mut s = encoder_shapes(d, entity_count, relation_count);
    s.push(("positions".into(), vec![config.k + 2, d]));
    for l in 0..config.layers {
        for h in 0..config.heads {
            for (n, shape) in [
                ("wq", vec![w, d]),
                ("wk", vec![w, d]),
                ("wv", vec![w, d]),
                ("uq", vec![d, d]),
                ("uk", vec![d, d]),
            ] {
                s.push((format!("block{l}.head{h}.{n}"), shape));
            }
        }
        for (n, shape) in [
            ("wo", vec![w, w]),
            ("ffn.w1", vec![w, f]),
            ("ffn.b1", vec![f]),
            ("ffn.w2", vec![f, w]),
            ("ffn.b2", vec![w]),
            ("ln1.gain", vec![w]),
            ("ln1.bias", vec![w]),
            ("ln2.gain", vec![w]),
            ("ln2.bias", vec![w]),
        ] {
            s.push((format!("block{l}.{n}"), shape));
        }
    }
    s.push(("head.w_in".into(), vec![d, w]));
    s.push(("head.w4".into(), vec![d, w]));
    s.push(("head.u2".into(), vec![d, 2]));
    s
}

/// Parameter handles of a full model. Weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransAm {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
    pub w_in: ParamId,
    pub w4: ParamId,
    pub u2: ParamId,
}

/// Shrinks the Xavier draw of the output projection so predictions start
/// near `[0.5, 0.5]`.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

impl TransAm {
    /// Creates a model with freshly initialised weights.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        entity_count: usize,
        relation_count: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        EncoderParams::init(&mut store, config.d_e, entity_count, relation_count, rng)?;
        let emb_bound = 0.5 / config.d_e as f64;
        for (name, shape) in model_shapes(&config, entity_count, relation_count) {
            if store.by_name(&name).is_some() {
                continue;
            }
            let t = if name == "positions" {
                Tensor::uniform(&shape, emb_bound, rng)
            } else if name.ends_with(".gain") {
                Tensor::new(shape.clone(), vec![1.0; shape[0]])?
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else if name == "head.u2" {
                let mut t = Tensor::xavier(shape[0], shape[1], rng);
                t.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
                t
            } else {
                Tensor::xavier(shape[0], shape[1], rng)
            };
            store.insert(name, t);
        }
        let model = Self::resolve(config, entity_count, relation_count, &store)?;
        Ok((model, store))
    }

    /// Resolves handles from an existing store, checking every shape.
    pub fn resolve(
        config: ModelConfig,
        entity_count: usize,
        relation_count: usize,
        store: &ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in model_shapes(&config, entity_count, relation_count) {
            let t = store.by_name(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let encoder = EncoderParams::resolve(store, config.d_e, entity_count, relation_count)?;
        let id = |n: String| store.id(&n);
        let blocks = (0..config.layers)
            .map(|l| {
                Ok(BlockParams {
                    heads: (0..config.heads)
                        .map(|h| {
                            let p = |n: &str| id(format!("block{l}.head{h}.{n}"));
                            Ok(HeadParams {
                                wq: p("wq")?,
                                wk: p("wk")?,
                                wv: p("wv")?,
                                uq: p("uq")?,
                                uk: p("uk")?,
                            })
                        })
                        .collect::<Result<_>>()?,
                    wo: id(format!("block{l}.wo"))?,
                    ffn_w1: id(format!("block{l}.ffn.w1"))?,
                    ffn_b1: id(format!("block{l}.ffn.b1"))?,
                    ffn_w2: id(format!("block{l}.ffn.w2"))?,
                    ffn_b2: id(format!("block{l}.ffn.b2"))?,
                    ln1_gain: id(format!("block{l}.ln1.gain"))?,
                    ln1_bias: id(format!("block{l}.ln1.bias"))?,
                    ln2_gain: id(format!("block{l}.ln2.gain"))?,
                    ln2_bias: id(format!("block{l}.ln2.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            positions: store.id("positions")?,
            blocks,
            w_in: store.id("head.w_in")?,
            w4: store.id("head.w4")?,
            u2: store.id("head.u2")?,
            config,
        })
    }

    pub fn cls_id(&self) -> usize {
        self.encoder.cls_id()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundModel<'_>> {
        Ok(BoundModel {
            model: self,
            encoder: self.encoder.bind(tape, store),
            positions: tape.param(store, self.positions),
            blocks: self.blocks.iter().map(|b| b.bind(tape, store)).collect(),
            w_in: tape.param(store, self.w_in),
            w4: tape.param(store, self.w4),
            u2: tape.param(store, self.u2),
            layout: self.config.layout()?,
        })
    }

    /// Probability `s̄⁽¹⁾` that each sequence holds, in evaluation mode.
    pub fn score(&self, store: &ParamStore, index: &NeighborIndex, seqs: &[QuerySequence]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape, store)?;
        let zs = seqs
            .iter()
            .map(|s| bound.forward(&mut tape, store, index, s, &mut Dropout::eval()))
            .collect::<Result<Vec<_>>>()?;
        let z = tape.concat_rows(&zs)?;
        let probs = bound.predict(&mut tape, z)?;
        Ok(tape.value(probs).rows().map(|r| r[1]).collect())
    }

    /// Forward pass keeping every attention weight matrix, for inspection.
    pub fn trace(&self, store: &ParamStore, index: &NeighborIndex, seq: &QuerySequence) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape, store)?;
        let (z, blocks) = bound.forward_traced(&mut tape, store, index, seq, &mut Dropout::eval())?;
        let probs = bound.predict(&mut tape, z)?;
        let collect = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(ForwardTrace {
            z_cls: tape.value(z).data().to_vec(),
            probs: tape.value(probs).data().to_vec(),
            local_weights: blocks.iter().map(|b| collect(&b.local_weights)).collect(),
            global_weights: blocks.iter().map(|b| collect(&b.global_weights)).collect(),
        })
    }
}

/// Realized values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub z_cls: Vec<f64>,
    pub probs: Vec<f64>,
    /// `[block][head]` local attention weights.
    pub local_weights: Vec<Vec<Tensor>>,
    /// `[block][head]` global attention weights.
    pub global_weights: Vec<Vec<Tensor>>,
}

/// Model weights bound to a tape.
pub struct BoundModel<'m> {
    model: &'m TransAm,
    encoder: BoundEncoder,
    positions: Var,
    blocks: Vec<BlockVars>,
    w_in: Var,
    w4: Var,
    u2: Var,
    layout: SlotLayout,
}

impl BoundModel<'_> {
    /// Final CLS hidden state `z` (a `1×D` row).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        index: &NeighborIndex,
        seq: &QuerySequence,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, store, index, seq, dropout)?.0)
    }

    pub fn forward_traced(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        index: &NeighborIndex,
        seq: &QuerySequence,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Vec<BlockTrace>)> {
        let cfg = &self.model.config;
        let expected = sequence_len(cfg.k);
        if seq.len() != expected {
            return Err(Error::Length {
                op: "forward",
                left: seq.len(),
                right: expected,
            });
        }
        if seq.entities[0] != self.model.cls_id() {
            return Err(Error::Config("sequence must start with the CLS token".into()));
        }
        let x = self.encoder.encode_sequence(tape, store, index, &seq.entities)?;
        let mut x = tape.matmul(x, self.w_in)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let t = transformer_block(tape, x, block, &self.layout, self.positions, cfg.theta_base, dropout)?;
            x = t.output;
            traces.push(t);
        }
        let z = tape.gather_rows(x, &[0])?;
        Ok((z, traces))
    }

    /// `softmax(U2ᵀ W4 z)` for each row of `z`; returns `B×2` probabilities.
    pub fn predict(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let hidden = tape.matmul_nt(z, self.w4)?;
        let logits = tape.matmul(hidden, self.u2)?;
        tape.softmax_rows(logits)
    }

    /// Runs forward in training mode for every sequence and returns the
    /// mean cross-entropy loss.
    pub fn batch_loss(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        index: &NeighborIndex,
        seqs: &[QuerySequence],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut dropout = Dropout {
            p: self.model.config.dropout,
            rng,
        };
        let zs = seqs
            .iter()
            .map(|s| self.forward(tape, store, index, s, &mut dropout))
            .collect::<Result<Vec<_>>>()?;
        let z = tape.concat_rows(&zs)?;
        let probs = self.predict(tape, z)?;
        let labels: Vec<f64> = seqs.iter().map(|s| f64::from(s.label)).collect();
        let total = bce_loss(tape, probs, &labels)?;
        Ok(tape.scale(total, 1.0 / seqs.len() as f64))
    }
}

/// Summed binary cross-entropy `-Σ (1-y) log s⁽⁰⁾ + y log s⁽¹⁾` with
/// probabilities clamped to `[1e-12, 1-1e-12]`.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &[f64]) -> Result<Var> {
    tape.bce(probs, labels)
}

/// Untracked `softmax(U2ᵀ W4 z)`.
pub fn predict(model: &TransAm, store: &ParamStore, z: &[f64]) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let w4 = tape.param(store, model.w4);
    let u2 = tape.param(store, model.u2);
    let hidden = tape.matmul_nt(zv, w4)?;
    let logits = tape.matmul(hidden, u2)?;
    let p = tape.softmax_rows(logits)?;
    let d = tape.value(p).data();
    Ok([d[0], d[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(4, 2, 0, 1).validate().is_err());
        assert!(ModelConfig::new(5, 2, 1, 1).validate().is_err());
        assert!(ModelConfig::new(4, 0, 1, 1).validate().is_err());
        assert!(ModelConfig::new(4, 2, 1, 0).validate().is_err());
        assert!(ModelConfig::new(4, 2, 1, 1).validate().is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TransAm::init(ModelConfig::new(4, 2, 0, 1), 5, 2, &mut rng).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let l = bce_loss(&mut tape, p, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        let l = bce_loss(&mut tape, p, &[1.0, 0.0]).unwrap();
        assert!(tape.value(l).item() < 1e-11);

        let rows = [vec![0.3, 0.7], vec![0.9, 0.1]];
        let p = tape.constant(Tensor::from_rows(&rows).unwrap());
        let both = bce_loss(&mut tape, p, &[1.0, 1.0]).unwrap();
        let expect = -(0.7f64.ln() + 0.1f64.ln());
        assert!((tape.value(both).item() - expect).abs() < 1e-14);
        assert!(bce_loss(&mut tape, p, &[1.0]).is_err());
    }
}
