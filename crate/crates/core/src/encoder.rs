//! Neighbor-attention entity encoder.
//!
//! For an entity `e` with background neighbors `(r_i, t_i)`:
//!
//! ```text
//! score_i = uᵀ ReLU(W1 [v_r ‖ v_t]) + b1
//! α       = softmax(score)
//! h_e     = Σ α_i v_t
//! x_e     = tanh(W2 v_e + W3 h_e)
//! ```
//!
//! An entity without neighbors uses `h_e = 0`. The `[CLS]` token is an extra
//! row of the entity table (id `entity_count`) and never has neighbors.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Graph, NeighborIndex, PretrainedEmbeddings, RelationId};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ENTITY_TABLE: &str = "encoder.entity";
pub const RELATION_TABLE: &str = "encoder.relation";

/// Parameter handles of the encoder inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub dim: usize,
    pub entity_count: usize,
    pub relation_count: usize,
    pub entity: ParamId,
    pub relation: ParamId,
    pub u: ParamId,
    pub b1: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

/// Names and shapes of every encoder tensor.
pub fn encoder_shapes(dim: usize, entity_count: usize, relation_count: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (ENTITY_TABLE.into(), vec![entity_count + 1, dim]),
        (RELATION_TABLE.into(), vec![relation_count.max(1), dim]),
        ("encoder.u".into(), vec![dim, 1]),
        ("encoder.b1".into(), vec![1]),
        ("encoder.w1".into(), vec![dim, 2 * dim]),
        ("encoder.w2".into(), vec![dim, dim]),
        ("encoder.w3".into(), vec![dim, dim]),
    ]
}

impl EncoderParams {
    /// Allocates freshly initialised encoder tensors in `store`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        entity_count: usize,
        relation_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let emb_bound = 0.5 / dim as f64;
        for (name, shape) in encoder_shapes(dim, entity_count, relation_count) {
            let t = match name.as_str() {
                ENTITY_TABLE | RELATION_TABLE => Tensor::uniform(&shape, emb_bound, rng),
                "encoder.b1" => Tensor::zeros(&shape),
                _ => Tensor::xavier(shape[0], shape[1], rng),
            };
            store.insert(name, t);
        }
        Self::resolve(store, dim, entity_count, relation_count)
    }

    /// Looks up existing encoder tensors and checks their shapes.
    pub fn resolve(store: &ParamStore, dim: usize, entity_count: usize, relation_count: usize) -> Result<Self> {
        for (name, shape) in encoder_shapes(dim, entity_count, relation_count) {
            let t = store.by_name(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            dim,
            entity_count,
            relation_count,
            entity: store.id(ENTITY_TABLE)?,
            relation: store.id(RELATION_TABLE)?,
            u: store.id("encoder.u")?,
            b1: store.id("encoder.b1")?,
            w1: store.id("encoder.w1")?,
            w2: store.id("encoder.w2")?,
            w3: store.id("encoder.w3")?,
        })
    }

    pub fn cls_id(&self) -> EntityId {
        self.entity_count
    }

    /// Copies pretrained vectors into the entity and relation tables by name.
    /// Returns how many rows were filled.
    pub fn load_pretrained(&self, store: &mut ParamStore, graph: &Graph, emb: &PretrainedEmbeddings) -> Result<usize> {
        if emb.dim != self.dim {
            return Err(Error::Config(format!(
                "pretrained dimension {} does not match d_e {}",
                emb.dim, self.dim
            )));
        }
        let mut filled = 0;
        for (table, vocab) in [(self.entity, &graph.entities), (self.relation, &graph.relations)] {
            let t = store.get_mut(table);
            for (id, name) in vocab.names().iter().enumerate() {
                if let Some(v) = emb.vectors.get(name) {
                    t.data_mut()[id * self.dim..(id + 1) * self.dim].copy_from_slice(v);
                    filled += 1;
                }
            }
        }
        Ok(filled)
    }

    /// Binds the shared encoder weights onto `tape`.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundEncoder {
        BoundEncoder {
            params: self.clone(),
            u: tape.param(store, self.u),
            b1: tape.param(store, self.b1),
            w1: tape.param(store, self.w1),
            w2: tape.param(store, self.w2),
            w3: tape.param(store, self.w3),
            cache: HashMap::new(),
        }
    }
}

/// Encoder weights bound to one tape, with a per-tape memo of encoded
/// entities so repeated entities share one subgraph.
#[derive(Debug)]
pub struct BoundEncoder {
    params: EncoderParams,
    u: Var,
    b1: Var,
    w1: Var,
    w2: Var,
    w3: Var,
    cache: HashMap<EntityId, Var>,
}

impl BoundEncoder {
    /// Attention weights `α` over the neighbors, as a `1×n` row.
    pub fn neighbor_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        neighbors: &[(RelationId, EntityId)],
    ) -> Result<(Var, Var)> {
        if neighbors.is_empty() {
            return Err(Error::Length {
                op: "neighbor_attention",
                left: 0,
                right: 1,
            });
        }
        let rels: Vec<usize> = neighbors.iter().map(|p| p.0).collect();
        let tails: Vec<usize> = neighbors.iter().map(|p| p.1).collect();
        if let Some(&r) = rels.iter().find(|&&r| r >= self.params.relation_count) {
            return Err(Error::UnknownId {
                kind: "relation",
                id: r,
            });
        }
        let vr = tape.param_rows(store, self.params.relation, &rels)?;
        let vt = tape.param_rows(store, self.params.entity, &tails)?;
        let cat = tape.concat_cols(&[vr, vt])?;
        let hidden = tape.matmul_nt(cat, self.w1)?;
        let hidden = tape.relu(hidden);
        let logits = tape.matmul(hidden, self.u)?;
        let logits = tape.add_row(logits, self.b1)?;
        let logits = tape.transpose(logits)?;
        let alpha = tape.softmax_rows(logits)?;
        Ok((alpha, vt))
    }

    /// `Σ α_i v_{t_i}` as a `1×d` row.
    pub fn aggregate(&self, tape: &mut Tape, alpha: Var, tails: Var) -> Result<Var> {
        let n_alpha = tape.value(alpha).len();
        let n_tails = tape.value(tails).dims2()?.0;
        if n_alpha != n_tails {
            return Err(Error::Length {
                op: "aggregate",
                left: n_alpha,
                right: n_tails,
            });
        }
        tape.matmul(alpha, tails)
    }

    /// `tanh(W2 v + W3 h)`; `h = None` is the empty-neighborhood case.
    pub fn fuse(&self, tape: &mut Tape, v: Var, h: Option<Var>) -> Result<Var> {
        let mut pre = tape.matmul_nt(v, self.w2)?;
        if let Some(h) = h {
            let agg = tape.matmul_nt(h, self.w3)?;
            pre = tape.add(pre, agg)?;
        }
        Ok(tape.tanh(pre))
    }

    /// Encodes one entity (or the CLS token) as a `1×d` row.
    pub fn encode_entity(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        index: &NeighborIndex,
        entity: EntityId,
    ) -> Result<Var> {
        if let Some(&v) = self.cache.get(&entity) {
            return Ok(v);
        }
        if entity > self.params.entity_count {
            return Err(Error::UnknownId {
                kind: "entity",
                id: entity,
            });
        }
        let neighbors = if entity == self.params.cls_id() {
            &[][..]
        } else {
            index.neighbors(entity)
        };
        let v = tape.param_rows(store, self.params.entity, &[entity])?;
        let h = if neighbors.is_empty() {
            None
        } else {
            let (alpha, tails) = self.neighbor_attention(tape, store, neighbors)?;
            Some(self.aggregate(tape, alpha, tails)?)
        };
        let x = self.fuse(tape, v, h)?;
        self.cache.insert(entity, x);
        Ok(x)
    }

    /// Stacks the encodings of `entities` into a `|seq|×d` matrix.
    pub fn encode_sequence(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        index: &NeighborIndex,
        entities: &[EntityId],
    ) -> Result<Var> {
        let rows = entities
            .iter()
            .map(|&e| self.encode_entity(tape, store, index, e))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }
}

/// Untracked encoding of a sequence, for inspection and tests.
pub fn encode_sequence(
    encoder: &EncoderParams,
    store: &ParamStore,
    index: &NeighborIndex,
    entities: &[EntityId],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut bound = encoder.bind(&mut tape, store);
    let x = bound.encode_sequence(&mut tape, store, index, entities)?;
    Ok(tape.value(x).clone())
}

/// Untracked neighbor attention weights.
pub fn neighbor_attention(
    encoder: &EncoderParams,
    store: &ParamStore,
    neighbors: &[(RelationId, EntityId)],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, store);
    let (alpha, _) = bound.neighbor_attention(&mut tape, store, neighbors)?;
    Ok(tape.value(alpha).data().to_vec())
}

/// Untracked `Σ α_i v_{t_i}`; the zero vector for no neighbors.
pub fn aggregate(
    encoder: &EncoderParams,
    store: &ParamStore,
    neighbors: &[(RelationId, EntityId)],
    alpha: &[f64],
) -> Result<Vec<f64>> {
    if alpha.len() != neighbors.len() {
        return Err(Error::Length {
            op: "aggregate",
            left: alpha.len(),
            right: neighbors.len(),
        });
    }
    let table = store.get(encoder.entity);
    let mut h = vec![0.0; encoder.dim];
    for (&(_, t), &a) in neighbors.iter().zip(alpha) {
        for (hv, tv) in h.iter_mut().zip(table.row(t)) {
            *hv += a * tv;
        }
    }
    Ok(h)
}

/// Untracked `tanh(W2 v + W3 h)`.
pub fn fuse(encoder: &EncoderParams, store: &ParamStore, v: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let d = encoder.dim;
    if v.len() != d || h.len() != d {
        return Err(Error::Length {
            op: "fuse",
            left: v.len().max(h.len()),
            right: d,
        });
    }
    let (w2, w3) = (store.get(encoder.w2), store.get(encoder.w3));
    Ok((0..d)
        .map(|i| {
            let s: f64 = (0..d).map(|j| w2.get(i, j) * v[j] + w3.get(i, j) * h[j]).sum();
            s.tanh()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::build_neighbor_index;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (Graph, ParamStore, EncoderParams) {
        let mut g = Graph::new();
        g.add_named("a", "r", "b");
        g.add_named("a", "s", "c");
        g.add_named("a", "r", "d");
        g.add_named("b", "r", "c");
        g.entities.intern("iso");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::init(&mut store, dim, g.entity_count(), g.relation_count(), &mut rng).unwrap();
        // larger embeddings than the default init so tanh is not near-linear
        for name in [ENTITY_TABLE, RELATION_TABLE] {
            let t = store.by_name_mut(name).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::uniform(&shape, 1.0, &mut rng).with_grad();
        }
        (g, store, enc)
    }

    /// Direct evaluation of the attention formula.
    fn alpha_oracle(store: &ParamStore, enc: &EncoderParams, neighbors: &[(usize, usize)]) -> Vec<f64> {
        let d = enc.dim;
        let (ent, rel) = (store.get(enc.entity), store.get(enc.relation));
        let (w1, u, b1) = (store.get(enc.w1), store.get(enc.u), store.get(enc.b1).item());
        let scores: Vec<f64> = neighbors
            .iter()
            .map(|&(r, t)| {
                let cat: Vec<f64> = rel.row(r).iter().chain(ent.row(t)).copied().collect();
                (0..d)
                    .map(|i| {
                        let pre: f64 = (0..2 * d).map(|j| w1.get(i, j) * cat[j]).sum();
                        u.get(i, 0) * pre.max(0.0)
                    })
                    .sum::<f64>()
                    + b1
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        scores.iter().map(|s| s.exp() / z).collect()
    }

    #[test]
    fn single_neighbor_weight_one() {
        let (_, store, enc) = setup(4);
        assert_eq!(neighbor_attention(&enc, &store, &[(0, 1)]).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let (_, store, enc) = setup(4);
        let a = neighbor_attention(&enc, &store, &[(0, 1), (0, 1)]).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attention_matches_formula() {
        let (_, store, enc) = setup(6);
        let n = [(0, 1), (1, 2), (0, 3)];
        let a = neighbor_attention(&enc, &store, &n).unwrap();
        let o = alpha_oracle(&store, &enc, &n);
        for (x, y) in a.iter().zip(&o) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_neighbors_rejected_by_attention() {
        let (_, store, enc) = setup(4);
        assert!(neighbor_attention(&enc, &store, &[]).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let (_, store, enc) = setup(4);
        let table = store.get(enc.entity);
        assert_eq!(aggregate(&enc, &store, &[(0, 2)], &[1.0]).unwrap(), table.row(2));
        assert_eq!(aggregate(&enc, &store, &[], &[]).unwrap(), vec![0.0; 4]);
        let h = aggregate(&enc, &store, &[(0, 1), (1, 3)], &[0.25, 0.75]).unwrap();
        for i in 0..4 {
            assert!((h[i] - (0.25 * table.row(1)[i] + 0.75 * table.row(3)[i])).abs() < 1e-15);
        }
        assert!(aggregate(&enc, &store, &[(0, 1)], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn fuse_cases() {
        let (_, mut store, enc) = setup(4);
        let v = [0.3, -0.2, 0.9, 0.1];
        let h = [0.5, 0.5, -0.4, 0.0];
        let x = fuse(&enc, &store, &v, &h).unwrap();
        assert!(x.iter().all(|c| c.abs() < 1.0));

        // matches tanh(W2 v + W3 h) through the tape path
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape, &store);
        let vv = tape.constant(Tensor::new(vec![1, 4], v.to_vec()).unwrap());
        let hv = tape.constant(Tensor::new(vec![1, 4], h.to_vec()).unwrap());
        let out = b.fuse(&mut tape, vv, Some(hv)).unwrap();
        for (a, c) in tape.value(out).data().iter().zip(&x) {
            assert!((a - c).abs() < 1e-12);
        }

        *store.get_mut(enc.w2) = Tensor::zeros(&[4, 4]).with_grad();
        *store.get_mut(enc.w3) = Tensor::zeros(&[4, 4]).with_grad();
        assert_eq!(fuse(&enc, &store, &v, &h).unwrap(), vec![0.0; 4]);
        *store.get_mut(enc.w2) = Tensor::identity(4).with_grad();
        assert_eq!(fuse(&enc, &store, &[0.0; 4], &h).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn sequence_rows() {
        let (g, store, enc) = setup(4);
        let idx = build_neighbor_index(&g, 50, 0);
        let a = g.entity_id("a").unwrap();
        let b = g.entity_id("b").unwrap();
        let seq = [enc.cls_id(), a, b, a, b];
        let x = encode_sequence(&enc, &store, &idx, &seq).unwrap();
        assert_eq!(x.shape(), &[5, 4]);
        assert_eq!(x.row(1), x.row(3));
        assert!(x.data().iter().all(|v| v.abs() < 1.0));
        assert!(encode_sequence(&enc, &store, &idx, &[enc.cls_id() + 1]).is_err());
    }

    #[test]
    fn isolated_entities_use_own_embedding_only() {
        let (g, store, enc) = setup(4);
        let idx = build_neighbor_index(&g, 50, 0);
        let iso = g.entity_id("iso").unwrap();
        let c = g.entity_id("c").unwrap();
        let x = encode_sequence(&enc, &store, &idx, &[enc.cls_id(), iso, c]).unwrap();
        let table = store.get(enc.entity);
        for (row, e) in [(0, enc.cls_id()), (1, iso), (2, c)] {
            let expect = fuse(&enc, &store, table.row(e), &[0.0; 4]).unwrap();
            for (p, q) in x.row(row).iter().zip(&expect) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
