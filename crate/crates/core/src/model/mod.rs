//! Full model: unimodal LM layers, cross-modal layers, attention pooling and
//! the answer head, plus training, evaluation, tracing and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod trace;
pub mod train;

use rayon::prelude::*;

pub use config::{OptimizerKind, RunConfig};

use crate::data::QAExample;
use crate::error::{Error, Result};
use crate::fusion::{GreaseLmLayer, Mint};
use crate::gnn::{node_type_rows, GnnLayer, GnnTables, Messages, NodeInit};
use crate::kg::KnowledgeGraph;
use crate::numerics::dropout::{hash_str, mix};
use crate::numerics::nn::{Builder, Linear, Mlp2};
use crate::numerics::{DropoutCtx, Graph, ParamGroup, ParamStore, Real, Var};
use crate::retrieval::{retrieve, LexicalScorer, Linker, Segments, Subgraph};
use crate::text::{encode_input, Embeddings, EncodedExample, LmLayer, Vocabulary};

/// Sizes that come from the data rather than the run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub kg_nodes: usize,
    pub kg_relations: usize,
}

/// `g = Σ_j β_j V e_j` with `β = softmax((Q h_int)·(K e_j)/√d)`.
#[derive(Clone, Debug)]
pub struct Pooling {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Pooling {
    /// Returns the pooled vector and the weights `[1, n_pooled]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, h_int: Var, e: Var, nodes: &[usize]) -> Result<(Var, Var)> {
        let d = self.k.d_out;
        let en = g.gather_rows(e, nodes)?;
        let q = self.q.forward(g, h_int)?;
        let k = self.k.forward(g, en)?;
        let v = self.v.forward(g, en)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let beta = g.softmax_rows(s);
        Ok((g.matmul(beta, v)?, beta))
    }
}

#[derive(Clone, Debug)]
pub struct GreaseLm {
    pub cfg: RunConfig,
    pub dims: ModelDims,
    pub embed: Embeddings,
    pub lm: Vec<LmLayer>,
    pub tables: GnnTables,
    pub node_init: NodeInit,
    pub layers: Vec<GreaseLmLayer>,
    pub pool: Pooling,
    pub head: Mlp2,
}

/// One candidate, ready for the forward pass.
#[derive(Clone, Debug)]
pub struct CandidateInput {
    pub tokens: EncodedExample,
    pub subgraph: Subgraph,
    pub msgs: Messages,
    /// Dropout key derived from the candidate text.
    pub key: u64,
}

#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub question: String,
    pub candidates: Vec<CandidateInput>,
    pub label: usize,
}

/// Everything recorded during one candidate forward.
pub struct CandidateOut {
    pub logit: Var,
    /// `h` after the unimodal stack, then after each cross-modal layer.
    pub h: Vec<Var>,
    /// `e^(0)` then `e` after each cross-modal layer.
    pub e: Vec<Var>,
    /// GNN attention `[messages, heads]` per cross-modal layer.
    pub alpha: Vec<Var>,
    /// Per-head self-attention of each unimodal layer.
    pub lm_attention: Vec<Vec<Var>>,
    pub pool_weights: Var,
}

impl GreaseLm {
    pub fn build(cfg: &RunConfig, dims: ModelDims) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, cfg.seed);
        let n = cfg.lm_layers;
        let embed = Embeddings::new(&mut b, dims.vocab_size, cfg.max_tokens, cfg.d_lm)?;
        let lm = (0..n)
            .map(|i| LmLayer::new(&mut b, &format!("lm.{i}"), cfg.d_lm, cfg.lm_heads, cfg.lm_ffn_hidden))
            .collect::<Result<Vec<_>>>()?;
        let tables = GnnTables::new(&mut b, cfg.d_gnn, dims.kg_relations)?;
        let node_init = NodeInit::new(&mut b, cfg.node_init_mode, dims.kg_nodes, cfg.d_gnn, cfg.seed)?;
        let mut layers = Vec::with_capacity(cfg.greaselm_layers);
        for l in 0..cfg.greaselm_layers {
            let mint_name = if cfg.share_mint {
                "fusion.mint".to_string()
            } else {
                format!("fusion.{l}.mint")
            };
            layers.push(GreaseLmLayer {
                lm: LmLayer::new(
                    &mut b,
                    &format!("lm.{}", n + l),
                    cfg.d_lm,
                    cfg.lm_heads,
                    cfg.lm_ffn_hidden,
                )?,
                gnn: GnnLayer::new(&mut b, &format!("gnn.{l}"), cfg.d_gnn, cfg.mlp_hidden, cfg.gnn_heads)?,
                mint: Mint::new(&mut b, &mint_name, cfg.d_lm, cfg.d_gnn, cfg.mint_hidden)?,
            });
        }
        let o = ParamGroup::Other;
        let pool = Pooling {
            q: Linear::new(&mut b, "pool.q", cfg.d_lm, cfg.d_gnn, o)?,
            k: Linear::new(&mut b, "pool.k", cfg.d_gnn, cfg.d_gnn, o)?,
            v: Linear::new(&mut b, "pool.v", cfg.d_gnn, cfg.d_gnn, o)?,
        };
        let head = Mlp2::new(&mut b, "head", cfg.d_lm + 2 * cfg.d_gnn, cfg.d_lm, 1, o)?;
        let model = Self {
            cfg: cfg.clone(),
            dims,
            embed,
            lm,
            tables,
            node_init,
            layers,
            pool,
            head,
        };
        Ok((model, store))
    }

    pub fn dropout_ctx(&self, step: u64, example_id: &str, cand: &CandidateInput, train: bool) -> DropoutCtx {
        if !train || self.cfg.dropout == 0.0 {
            return DropoutCtx::disabled();
        }
        DropoutCtx::new(
            self.cfg.dropout,
            self.cfg.seed,
            step,
            mix(hash_str(example_id), cand.key),
        )
    }

    /// Encodes one candidate: token layout and retrieved subgraph.
    pub fn prepare_candidate(
        &self,
        ex: &QAExample,
        answer: &str,
        vocab: &Vocabulary,
        kg: &KnowledgeGraph,
        linker: &Linker,
    ) -> Result<CandidateInput> {
        let tokens = encode_input(&ex.context, &ex.question, answer, vocab, self.cfg.max_tokens)?;
        let seg = Segments {
            context: &ex.context,
            question: &ex.question,
            answer,
        };
        let subgraph = retrieve(&seg, kg, linker, &self.cfg.retrieval(), &LexicalScorer::default())?;
        let msgs = Messages::new(&subgraph, self.dims.kg_relations)?;
        Ok(CandidateInput {
            tokens,
            subgraph,
            msgs,
            key: hash_str(answer),
        })
    }

    /// Uses the example's own graph when present, else `global`.
    pub fn prepare(
        &self,
        ex: &QAExample,
        vocab: &Vocabulary,
        global: Option<&(KnowledgeGraph, Linker)>,
    ) -> Result<PreparedExample> {
        ex.validate()?;
        let own;
        let (kg, linker) = match (&ex.kg, global) {
            (Some(k), _) => {
                let g = k.to_graph()?;
                let l = Linker::new(&g);
                own = (g, l);
                (&own.0, &own.1)
            }
            (None, Some((g, l))) => (g, l),
            (None, None) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: no example graph and no global graph given",
                    ex.id
                )))
            }
        };
        let candidates = ex
            .candidates
            .iter()
            .map(|a| self.prepare_candidate(ex, a, vocab, kg, linker))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedExample {
            id: ex.id.clone(),
            question: ex.question.clone(),
            candidates,
            label: ex.label,
        })
    }

    /// Prepares examples in parallel; output order follows input order.
    pub fn prepare_all(
        &self,
        data: &[QAExample],
        vocab: &Vocabulary,
        global: Option<&(KnowledgeGraph, Linker)>,
    ) -> Result<Vec<PreparedExample>> {
        data.par_iter().map(|ex| self.prepare(ex, vocab, global)).collect()
    }

    /// Indices of nodes entering the attention pool.
    pub fn pool_nodes(&self, sg: &Subgraph) -> Vec<usize> {
        let start = if self.cfg.pool_include_int { 0 } else { 1 };
        (start..sg.len()).collect()
    }

    /// Embeddings and the unimodal stack.
    pub fn encode_text<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: &EncodedExample,
        drop: &DropoutCtx,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let mut h = self.embed.forward(g, x, drop)?;
        let mut attn = Vec::new();
        for layer in &self.lm {
            let (next, p) = layer.forward_with_attention(g, h, &x.pad_mask, drop)?;
            h = next;
            attn.push(p);
        }
        Ok((h, attn))
    }

    pub fn forward_candidate<T: Real>(
        &self,
        g: &mut Graph<T>,
        c: &CandidateInput,
        drop: &DropoutCtx,
    ) -> Result<CandidateOut> {
        let (mut h, lm_attention) = self.encode_text(g, &c.tokens, drop)?;
        let mut e = self.node_init.forward(g, &c.subgraph)?;
        let types = node_type_rows(g, &self.tables, &c.subgraph)?;
        let mut hs = vec![h];
        let mut es = vec![e];
        let mut alpha = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let fuse = self.cfg.interaction_schedule.fuses(l + 1);
            let out = layer.forward(g, h, e, types, &self.tables, &c.msgs, &c.tokens.pad_mask, drop, fuse)?;
            h = out.h;
            e = out.e;
            hs.push(h);
            es.push(e);
            alpha.push(out.alpha);
        }
        let h_int = g.row(h, 0)?;
        let e_int = g.row(e, Subgraph::INTERACTION)?;
        let (pooled, pool_weights) = self.pool.forward(g, h_int, e, &self.pool_nodes(&c.subgraph))?;
        let z = g.concat_cols(&[h_int, e_int, pooled])?;
        let logit = self.head.forward(g, z, drop)?;
        Ok(CandidateOut {
            logit,
            h: hs,
            e: es,
            alpha,
            lm_attention,
            pool_weights,
        })
    }

    /// Candidate logits as a `[1, k]` row.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, ex: &PreparedExample, step: u64, train: bool) -> Result<Var> {
        if ex.candidates.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: zero candidates", ex.id)));
        }
        let mut logits = Vec::with_capacity(ex.candidates.len());
        for c in &ex.candidates {
            let drop = self.dropout_ctx(step, &ex.id, c, train);
            logits.push(self.forward_candidate(g, c, &drop)?.logit);
        }
        g.concat_cols(&logits)
    }

    pub fn loss<T: Real>(&self, g: &mut Graph<T>, ex: &PreparedExample, step: u64, train: bool) -> Result<Var> {
        let logits = self.logits(g, ex, step, train)?;
        g.cross_entropy(logits, ex.label)
    }
}

/// Vocabulary over every text field of the datasets.
pub fn build_vocab(data: &[QAExample]) -> Vocabulary {
    let texts = data.iter().flat_map(|ex| {
        [ex.context.as_str(), ex.question.as_str()]
            .into_iter()
            .chain(ex.candidates.iter().map(String::as_str))
    });
    Vocabulary::build(texts)
}

/// Node-id and relation-id bounds across example graphs, or from `global`.
pub fn graph_dims(data: &[QAExample], global: Option<&KnowledgeGraph>) -> (usize, usize) {
    let mut nodes = global.map_or(0, |g| g.node_id_bound());
    let mut rels = global.map_or(0, |g| g.relation_id_bound());
    for ex in data {
        if let Some(k) = &ex.kg {
            for (id, _) in &k.nodes {
                nodes = nodes.max(*id as usize + 1);
            }
            for e in &k.edges {
                rels = rels.max(e[1] as usize + 1);
            }
        }
    }
    (nodes.max(1), rels.max(1))
}
