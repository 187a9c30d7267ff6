//! Local (masked, rotary) and global (triple-position) attention heads.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{rotary_angle, Tape, Var};
use crate::tensor::Tensor;

/// Per-head projection weights of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub uq: ParamId,
    pub uk: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub uq: Var,
    pub uk: Var,
}

impl HeadParams {
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> HeadVars {
        HeadVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            uq: tape.param(store, self.uq),
            uk: tape.param(store, self.uk),
        }
    }
}

/// Content projections `XW^Q`, `XW^K`, `XW^V`, shared by both attention paths.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<Projections> {
    Ok(Projections {
        q: tape.matmul(x, head.wq)?,
        k: tape.matmul(x, head.wk)?,
        v: tape.matmul(x, head.wv)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    pub output: Var,
    pub weights: Var,
}

/// Rotates pairs `(v_2j, v_2j+1)` by `m·θ_j`, `θ_j = theta_base^(-2j/d)`.
pub fn rotary_apply(v: &[f64], m: usize, theta_base: f64) -> Result<Vec<f64>> {
    let d = v.len();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary width {d} is odd")));
    }
    let mut out = v.to_vec();
    for j in 0..d / 2 {
        let (s, c) = rotary_angle(m, j, d, theta_base).sin_cos();
        out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s;
        out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c;
    }
    Ok(out)
}

/// Pre-softmax local scores `rot(Q)·rot(K)ᵀ / √d`, before masking.
pub fn local_scores(tape: &mut Tape, proj: &Projections, roles: &[usize], theta_base: f64) -> Result<Var> {
    let d = tape.value(proj.q).dims2()?.1;
    let q = tape.rotary(proj.q, roles, theta_base)?;
    let k = tape.rotary(proj.k, roles, theta_base)?;
    let s = tape.matmul_nt(q, k)?;
    Ok(tape.scale(s, 1.0 / (d as f64).sqrt()))
}

/// Intra-triple attention: rotary role encoding on queries and keys, additive
/// block mask, unrotated values.
pub fn local_attention(
    tape: &mut Tape,
    proj: &Projections,
    mask: &Tensor,
    roles: &[usize],
    theta_base: f64,
) -> Result<AttentionOut> {
    let scores = local_scores(tape, proj, roles, theta_base)?;
    let weights = tape.softmax_rows_masked(scores, Some(mask))?;
    let output = tape.matmul(weights, proj.v)?;
    Ok(AttentionOut { output, weights })
}

/// Pre-softmax global scores `(QKᵀ + (PU^Q)(PU^K)ᵀ) / √(2d)` where `P` holds
/// the position-table rows gathered per slot.
pub fn global_scores(
    tape: &mut Tape,
    proj: &Projections,
    position_table: Var,
    positions: &[usize],
    head: &HeadVars,
) -> Result<Var> {
    let d = tape.value(proj.q).dims2()?.1;
    let p = tape.gather_rows(position_table, positions)?;
    let pq = tape.matmul(p, head.uq)?;
    let pk = tape.matmul(p, head.uk)?;
    let content = tape.matmul_nt(proj.q, proj.k)?;
    let pos = tape.matmul_nt(pq, pk)?;
    let sum = tape.add(content, pos)?;
    Ok(tape.scale(sum, 1.0 / (2.0 * d as f64).sqrt()))
}

/// Unmasked inter-triple attention with decoupled position scores.
pub fn global_attention(
    tape: &mut Tape,
    proj: &Projections,
    position_table: Var,
    positions: &[usize],
    head: &HeadVars,
) -> Result<AttentionOut> {
    let scores = global_scores(tape, proj, position_table, positions, head)?;
    let weights = tape.softmax_rows(scores)?;
    let output = tape.matmul(weights, proj.v)?;
    Ok(AttentionOut { output, weights })
}

/// Sums local and global outputs per head, concatenates heads, projects by `W^O`.
pub fn mha_combine(tape: &mut Tape, locals: &[Var], globals: &[Var], wo: Var) -> Result<Var> {
    if locals.len() != globals.len() || locals.is_empty() {
        return Err(Error::Length {
            op: "mha_combine",
            left: locals.len(),
            right: globals.len(),
        });
    }
    let heads = locals
        .iter()
        .zip(globals)
        .map(|(&l, &g)| tape.add(l, g))
        .collect::<Result<Vec<_>>>()?;
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(cat, wo)
}
