//! Relation- and node-type-aware multi-head graph attention over a subgraph.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::dropout::mix;
use crate::numerics::nn::{Builder, Linear, Mlp2};
use crate::numerics::{DropoutCtx, Graph, ParamGroup, ParamId, Real, Tensor, Var};
use crate::retrieval::{EdgeRel, NodeType, Subgraph};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NodeInitMode {
    #[default]
    LearnedTable,
    RandomFixed,
    Zero,
}

impl FromStr for NodeInitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned_table" => Ok(Self::LearnedTable),
            "random_fixed" => Ok(Self::RandomFixed),
            "zero" => Ok(Self::Zero),
            _ => Err(Error::Config(format!("unknown node init mode `{s}`"))),
        }
    }
}

impl fmt::Display for NodeInitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LearnedTable => "learned_table",
            Self::RandomFixed => "random_fixed",
            Self::Zero => "zero",
        })
    }
}

/// Message list of a subgraph. Every edge `h → t` yields the message `h → t`
/// with its relation and `t → h` with the reversed relation; interaction
/// edges use one reserved id in both directions and every node gets a
/// self-loop with another. Sorted by (dst, src, rel).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Messages {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rel: Vec<usize>,
    pub n_nodes: usize,
}

impl Messages {
    /// Size of the relation table for `n_relations` KG relations.
    pub fn table_size(n_relations: usize) -> usize {
        2 * n_relations + 2
    }

    pub fn interaction_rel(n_relations: usize) -> usize {
        2 * n_relations
    }

    pub fn self_rel(n_relations: usize) -> usize {
        2 * n_relations + 1
    }

    pub fn new(sg: &Subgraph, n_relations: usize) -> Result<Self> {
        let n = sg.len();
        let mut triples = Vec::with_capacity(2 * sg.edges.len() + n);
        for e in &sg.edges {
            if e.head >= n || e.tail >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) outside subgraph of {n} nodes",
                    e.head, e.tail
                )));
            }
            let (fwd, rev) = match e.rel {
                EdgeRel::Kg(r) if (r as usize) < n_relations => (r as usize, r as usize + n_relations),
                EdgeRel::Kg(r) => {
                    return Err(Error::InvalidArgument(format!(
                        "relation {r} outside table of {n_relations}"
                    )))
                }
                EdgeRel::Interaction => {
                    let r = Self::interaction_rel(n_relations);
                    (r, r)
                }
            };
            triples.push((e.tail, e.head, fwd));
            triples.push((e.head, e.tail, rev));
        }
        for j in 0..n {
            triples.push((j, j, Self::self_rel(n_relations)));
        }
        triples.sort_unstable();
        Ok(Self {
            dst: triples.iter().map(|t| t.0).collect(),
            src: triples.iter().map(|t| t.1).collect(),
            rel: triples.iter().map(|t| t.2).collect(),
            n_nodes: n,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Node-type and relation embeddings shared by all GNN layers.
#[derive(Clone, Debug)]
pub struct GnnTables {
    pub node_type: ParamId,
    pub relation: ParamId,
    pub n_relations: usize,
}

impl GnnTables {
    pub fn new(b: &mut Builder, d: usize, n_relations: usize) -> Result<Self> {
        let g = ParamGroup::Other;
        Ok(Self {
            node_type: b.uniform("gnn.node_type", &[NodeType::COUNT, d], 0.1, g)?,
            relation: b.uniform("gnn.relation", &[Messages::table_size(n_relations), d], 0.1, g)?,
            n_relations,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub f_r: Mlp2,
    pub f_m: Linear,
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_n: Mlp2,
    pub heads: usize,
    pub d: usize,
}

/// Layer output plus the attention weights `[messages, heads]`.
pub struct GnnOut {
    pub e: Var,
    pub alpha: Var,
}

impl GnnLayer {
    pub fn new(b: &mut Builder, name: &str, d: usize, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} gnn heads do not divide width {d}")));
        }
        let g = ParamGroup::Other;
        Ok(Self {
            f_r: Mlp2::new(b, &format!("{name}.f_r"), 3 * d, hidden, d, g)?,
            f_m: Linear::new(b, &format!("{name}.f_m"), 3 * d, d, g)?,
            f_q: Linear::new(b, &format!("{name}.f_q"), 2 * d, d, g)?,
            f_k: Linear::new(b, &format!("{name}.f_k"), 3 * d, d, g)?,
            f_n: Mlp2::new(b, &format!("{name}.f_n"), d, hidden, d, g)?,
            heads,
            d,
        })
    }

    /// Relation features `r_sj = f_r([r̃; u_s; u_j])` per message.
    pub fn relation_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        tables: &GnnTables,
        types: Var,
        msgs: &Messages,
        drop: &DropoutCtx,
    ) -> Result<Var> {
        let rel_table = g.param(tables.relation);
        let rt = g.gather_rows(rel_table, &msgs.rel)?;
        let us = g.gather_rows(types, &msgs.src)?;
        let uj = g.gather_rows(types, &msgs.dst)?;
        let x = g.concat_cols(&[rt, us, uj])?;
        self.f_r.forward(g, x, drop)
    }

    /// `types` holds one node-type embedding row per node.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        e: Var,
        types: Var,
        tables: &GnnTables,
        msgs: &Messages,
        drop: &DropoutCtx,
    ) -> Result<GnnOut> {
        let shape = g.shape(e).to_vec();
        if shape != [msgs.n_nodes, self.d] {
            return Err(Error::shape("gnn_layer", &shape, &[msgs.n_nodes, self.d]));
        }
        let r = self.relation_features(g, tables, types, msgs, drop)?;
        let es = g.gather_rows(e, &msgs.src)?;
        let ej = g.gather_rows(e, &msgs.dst)?;
        let us = g.gather_rows(types, &msgs.src)?;
        let uj = g.gather_rows(types, &msgs.dst)?;

        let m_in = g.concat_cols(&[es, us, r])?;
        let m = self.f_m.forward(g, m_in)?;

        let q_in = g.concat_cols(&[e, types])?;
        let q_node = self.f_q.forward(g, q_in)?;
        let q = g.gather_rows(q_node, &msgs.src)?;
        let k_in = g.concat_cols(&[ej, uj, r])?;
        let k = self.f_k.forward(g, k_in)?;

        let dh = self.d / self.heads;
        let qk = g.mul(q, k)?;
        let gamma = g.block_sum_cols(qk, self.heads)?;
        let gamma = g.scale(gamma, 1.0 / (dh as f64).sqrt());
        let alpha = g.segment_softmax(gamma, &msgs.dst, msgs.n_nodes)?;

        let weights = g.expand_blocks(alpha, dh)?;
        let weighted = g.mul(m, weights)?;
        let agg = g.scatter_add_rows(weighted, &msgs.dst, msgs.n_nodes)?;
        let upd = self.f_n.forward(g, agg, drop)?;
        Ok(GnnOut {
            e: g.add(upd, e)?,
            alpha,
        })
    }
}

/// Produces `e^(0)`: the interaction node from a learned vector, the
/// fallback dummy as zeros, other nodes per [`NodeInitMode`].
#[derive(Clone, Debug)]
pub struct NodeInit {
    pub mode: NodeInitMode,
    pub interaction: ParamId,
    pub table: Option<ParamId>,
    pub proj: Option<Linear>,
    pub n_kg_nodes: usize,
    pub d: usize,
    pub seed: u64,
}

impl NodeInit {
    pub fn new(b: &mut Builder, mode: NodeInitMode, n_kg_nodes: usize, d: usize, seed: u64) -> Result<Self> {
        let g = ParamGroup::Other;
        let interaction = b.uniform("gnn.init.interaction", &[1, d], 0.1, g)?;
        let (table, proj) = match mode {
            NodeInitMode::LearnedTable => (
                Some(b.uniform("gnn.init.table", &[n_kg_nodes.max(1), d], 0.1, g)?),
                Some(Linear::new(b, "gnn.init.proj", d, d, g)?),
            ),
            NodeInitMode::RandomFixed => (None, Some(Linear::new(b, "gnn.init.proj", d, d, g)?)),
            NodeInitMode::Zero => (None, None),
        };
        Ok(Self {
            mode,
            interaction,
            table,
            proj,
            n_kg_nodes,
            d,
            seed,
        })
    }

    /// Fixed pseudo-random vector for a KG node; not a parameter.
    pub fn fixed_row(&self, global: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, global as u64));
        (0..self.d).map(|_| rng.gen_range(-0.1..0.1)).collect()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, sg: &Subgraph) -> Result<Var> {
        let n = sg.len();
        let real: Vec<(usize, u32)> = sg
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| node.global.map(|gid| (i, gid)))
            .collect();
        if let Some(&(_, bad)) = real.iter().find(|(_, gid)| *gid as usize >= self.n_kg_nodes) {
            return Err(Error::UnknownNode(bad));
        }
        let zeros = g.constant(Tensor::zeros(&[n, self.d]));
        let base = if real.is_empty() || self.mode == NodeInitMode::Zero {
            zeros
        } else {
            let rows = match self.mode {
                NodeInitMode::LearnedTable => {
                    let table = g.param(self.table.expect("table in learned mode"));
                    let idx: Vec<usize> = real.iter().map(|&(_, gid)| gid as usize).collect();
                    g.gather_rows(table, &idx)?
                }
                _ => {
                    let flat: Vec<f64> = real.iter().flat_map(|&(_, gid)| self.fixed_row(gid)).collect();
                    g.constant(Tensor::from_f64(&[real.len(), self.d], &flat)?)
                }
            };
            let proj = self.proj.as_ref().expect("projection in table modes");
            let rows = proj.forward(g, rows)?;
            let at: Vec<usize> = real.iter().map(|&(i, _)| i).collect();
            g.scatter_add_rows(rows, &at, n)?
        };
        let int = g.param(self.interaction);
        g.set_row(base, Subgraph::INTERACTION, int)
    }
}

/// One node-type embedding row per subgraph node.
pub fn node_type_rows<T: Real>(g: &mut Graph<T>, tables: &GnnTables, sg: &Subgraph) -> Result<Var> {
    let table = g.param(tables.node_type);
    let idx: Vec<usize> = sg.nodes.iter().map(|n| n.ty.index()).collect();
    g.gather_rows(table, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, sample_coords, ParamStore};
    use crate::retrieval::{SubEdge, SubNode};

    fn chain(n: usize) -> Subgraph {
        let mut nodes = vec![SubNode {
            global: None,
            ty: NodeType::Interaction,
        }];
        for i in 1..n {
            nodes.push(SubNode {
                global: Some(i as u32),
                ty: if i == 1 { NodeType::Question } else { NodeType::Bridge },
            });
        }
        let mut edges = vec![SubEdge {
            head: 0,
            rel: EdgeRel::Interaction,
            tail: 1,
        }];
        for i in 1..n - 1 {
            edges.push(SubEdge {
                head: i,
                rel: EdgeRel::Kg((i % 2) as u32),
                tail: i + 1,
            });
        }
        Subgraph {
            nodes,
            edges,
            linked: vec![1],
        }
    }

    struct Fixture {
        store: ParamStore<f32>,
        tables: GnnTables,
        layer: GnnLayer,
        init: NodeInit,
    }

    fn fixture(d: usize, heads: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 11);
        let tables = GnnTables::new(&mut b, d, 2).unwrap();
        let layer = GnnLayer::new(&mut b, "gnn.0", d, 6, heads).unwrap();
        let init = NodeInit::new(&mut b, NodeInitMode::LearnedTable, 10, d, 3).unwrap();
        Fixture {
            store,
            tables,
            layer,
            init,
        }
    }

    #[test]
    fn messages_include_both_directions_and_self_loops() {
        let sg = chain(3);
        let m = Messages::new(&sg, 2).unwrap();
        assert_eq!(m.len(), 2 * 2 + 3);
        let has = |s, d, r| (0..m.len()).any(|i| m.src[i] == s && m.dst[i] == d && m.rel[i] == r);
        assert!(has(0, 1, 4) && has(1, 0, 4));
        assert!(has(1, 2, 1) && has(2, 1, 3));
        assert!((0..3).all(|j| has(j, j, 5)));
        assert!(m.dst.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn attention_normalizes_per_destination() {
        let f = fixture(4, 2);
        let sg = chain(5);
        let msgs = Messages::new(&sg, 2).unwrap();
        let mut g = Graph::new(&f.store);
        let e = f.init.forward(&mut g, &sg).unwrap();
        let types = node_type_rows(&mut g, &f.tables, &sg).unwrap();
        let out = f
            .layer
            .forward(&mut g, e, types, &f.tables, &msgs, &DropoutCtx::disabled())
            .unwrap();
        let a = g.value(out.alpha);
        for j in 0..sg.len() {
            for h in 0..2 {
                let s: f64 = (0..msgs.len())
                    .filter(|&i| msgs.dst[i] == j)
                    .map(|i| a.get(i, h) as f64)
                    .sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let f = fixture(4, 2);
        let sg = Subgraph {
            nodes: vec![
                SubNode {
                    global: None,
                    ty: NodeType::Interaction,
                },
                SubNode {
                    global: None,
                    ty: NodeType::Bridge,
                },
            ],
            edges: vec![],
            linked: vec![],
        };
        let msgs = Messages::new(&sg, 2).unwrap();
        let mut g = Graph::new(&f.store);
        let e = f.init.forward(&mut g, &sg).unwrap();
        assert!(g.value(e).row(1).iter().all(|&x| x == 0.0));
        let types = node_type_rows(&mut g, &f.tables, &sg).unwrap();
        let out = f
            .layer
            .forward(&mut g, e, types, &f.tables, &msgs, &DropoutCtx::disabled())
            .unwrap();
        assert!(g.value(out.alpha).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zeroed_output_layer_is_identity() {
        let mut f = fixture(4, 2);
        for id in [f.layer.f_n.fc2.weight, f.layer.f_n.fc2.bias] {
            f.store.get_mut(id).tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let sg = chain(5);
        let msgs = Messages::new(&sg, 2).unwrap();
        let mut g = Graph::new(&f.store);
        let e = f.init.forward(&mut g, &sg).unwrap();
        let types = node_type_rows(&mut g, &f.tables, &sg).unwrap();
        let out = f
            .layer
            .forward(&mut g, e, types, &f.tables, &msgs, &DropoutCtx::disabled())
            .unwrap();
        assert_eq!(g.value(out.e), g.value(e));
    }

    #[test]
    fn learned_table_rows_match_direct_read() {
        let f = fixture(4, 2);
        let sg = chain(4);
        let mut g = Graph::new(&f.store);
        let e = f.init.forward(&mut g, &sg).unwrap();
        let e = g.value(e).clone();
        let table = f.store.tensor(f.init.table.unwrap());
        let proj = f.init.proj.as_ref().unwrap();
        let w = f.store.tensor(proj.weight);
        let b = f.store.tensor(proj.bias);
        for (local, node) in sg.nodes.iter().enumerate().skip(1) {
            let row = table.row(node.global.unwrap() as usize);
            for c in 0..4 {
                let v: f32 = (0..4).map(|k| row[k] * w.get(k, c)).sum::<f32>() + b.data()[c];
                assert!((e.get(local, c) - v).abs() < 1e-6);
            }
        }
        assert_eq!(e.row(0), f.store.tensor(f.init.interaction).data());
    }

    #[test]
    fn zero_mode_leaves_only_interaction() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 1);
        let init = NodeInit::new(&mut b, NodeInitMode::Zero, 10, 4, 0).unwrap();
        let sg = chain(4);
        let mut g = Graph::new(&store);
        let e = init.forward(&mut g, &sg).unwrap();
        for r in 1..4 {
            assert!(g.value(e).row(r).iter().all(|&x| x == 0.0));
        }
        assert!("bogus".parse::<NodeInitMode>().is_err());
    }

    #[test]
    fn gradient_check_layer() {
        let f = fixture(4, 2);
        let p64: ParamStore<f64> = f.store.cast();
        let sg = chain(5);
        let msgs = Messages::new(&sg, 2).unwrap();
        let model = |g: &mut Graph<f64>| {
            let e = f.init.forward(g, &sg)?;
            let types = node_type_rows(g, &f.tables, &sg)?;
            let out = f
                .layer
                .forward(g, e, types, &f.tables, &msgs, &DropoutCtx::disabled())?;
            let sq = g.mul(out.e, out.e)?;
            Ok(g.sum_all(sq))
        };
        let coords = sample_coords(&p64, 60, 4, |_| true);
        let r = grad_check(model, &p64, &coords, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.worst());
    }
}
