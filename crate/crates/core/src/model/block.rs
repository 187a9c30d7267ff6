//! Post-norm transformer block with local-global multi-head attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{global_attention, local_attention, mha_combine, project, HeadParams, HeadVars};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl BlockParams {
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BlockVars {
        BlockVars {
            heads: self.heads.iter().map(|h| h.bind(tape, store)).collect(),
            wo: tape.param(store, self.wo),
            ffn_w1: tape.param(store, self.ffn_w1),
            ffn_b1: tape.param(store, self.ffn_b1),
            ffn_w2: tape.param(store, self.ffn_w2),
            ffn_b2: tape.param(store, self.ffn_b2),
            ln1_gain: tape.param(store, self.ln1_gain),
            ln1_bias: tape.param(store, self.ln1_bias),
            ln2_gain: tape.param(store, self.ln2_gain),
            ln2_bias: tape.param(store, self.ln2_bias),
        }
    }
}

/// Inverted dropout on sub-layer outputs; inactive without an rng or at `p = 0`.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn eval() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.p;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Slot structure shared by every block for a given `K`.
#[derive(Debug, Clone)]
pub struct SlotLayout {
    pub mask: Tensor,
    pub roles: Vec<usize>,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub output: Var,
    pub local_weights: Vec<Var>,
    pub global_weights: Vec<Var>,
}

/// `h = LN(X + MHA(X))`, `X' = LN(h + FFN(h))`.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    layout: &SlotLayout,
    position_table: Var,
    theta_base: f64,
    dropout: &mut Dropout<'_>,
) -> Result<BlockTrace> {
    let mut locals = Vec::with_capacity(block.heads.len());
    let mut globals = Vec::with_capacity(block.heads.len());
    let mut local_weights = Vec::with_capacity(block.heads.len());
    let mut global_weights = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let proj = project(tape, x, head)?;
        let l = local_attention(tape, &proj, &layout.mask, &layout.roles, theta_base)?;
        let g = global_attention(tape, &proj, position_table, &layout.positions, head)?;
        locals.push(l.output);
        globals.push(g.output);
        local_weights.push(l.weights);
        global_weights.push(g.weights);
    }
    let mha = mha_combine(tape, &locals, &globals, block.wo)?;
    let mha = dropout.apply(tape, mha)?;
    let res = tape.add(x, mha)?;
    let h = tape.layer_norm(res, block.ln1_gain, block.ln1_bias, LN_EPS)?;

    let f = tape.matmul(h, block.ffn_w1)?;
    let f = tape.add_row(f, block.ffn_b1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, block.ffn_w2)?;
    let f = tape.add_row(f, block.ffn_b2)?;
    let f = dropout.apply(tape, f)?;
    let res = tape.add(h, f)?;
    let output = tape.layer_norm(res, block.ln2_gain, block.ln2_bias, LN_EPS)?;
    Ok(BlockTrace {
        output,
        local_weights,
        global_weights,
    })
}
