//! Interaction-node attention per GNN layer and a best-first walk over the
//! layer-averaged attention.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::Serialize;

use super::{GreaseLm, PreparedExample};
use crate::error::{Error, Result};
use crate::gnn::Messages;
use crate::numerics::{DropoutCtx, Graph, ParamStore, Tensor};
use crate::retrieval::Subgraph;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeWeight {
    pub local: usize,
    pub global: Option<u32>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerAttention {
    pub layer: usize,
    /// Weights over the interaction node's neighbours and itself.
    pub weights: Vec<NodeWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub example_id: String,
    pub candidate: usize,
    pub layers: Vec<LayerAttention>,
    /// Local ids in best-first visiting order, starting at the interaction node.
    pub best_first: Vec<usize>,
    /// Global ids for `best_first` (null for the interaction node).
    pub best_first_global: Vec<Option<u32>>,
}

/// Head-averaged attention weight of every message.
pub fn head_mean(alpha: &Tensor<f64>) -> Vec<f64> {
    (0..alpha.rows())
        .map(|r| alpha.row(r).iter().sum::<f64>() / alpha.cols() as f64)
        .collect()
}

/// Messages arriving at `node` with their weights.
pub fn incoming(msgs: &Messages, weights: &[f64], node: usize) -> Vec<(usize, f64)> {
    (0..msgs.len())
        .filter(|&m| msgs.dst[m] == node)
        .map(|m| (msgs.src[m], weights[m]))
        .collect()
}

#[derive(PartialEq)]
struct Entry(f64, Reverse<usize>);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Best-first expansion from `start`: a node is reached from a visited node
/// `u` with priority equal to the weight `u` puts on it; the highest
/// priority is visited next, the lower local id on ties.
pub fn best_first(msgs: &Messages, weights: &[f64], start: usize) -> Vec<usize> {
    let mut visited = vec![false; msgs.n_nodes];
    let mut order = Vec::new();
    let mut heap = BinaryHeap::from([Entry(f64::INFINITY, Reverse(start))]);
    while let Some(Entry(_, Reverse(u))) = heap.pop() {
        if visited[u] {
            continue;
        }
        visited[u] = true;
        order.push(u);
        for (s, w) in incoming(msgs, weights, u) {
            if !visited[s] {
                heap.push(Entry(w, Reverse(s)));
            }
        }
    }
    order
}

/// Runs candidate `cand` of `ex` with dropout off and records the trace.
pub fn trace_candidate(model: &GreaseLm, params: &ParamStore<f32>, ex: &PreparedExample, cand: usize) -> Result<Trace> {
    let c = ex
        .candidates
        .get(cand)
        .ok_or_else(|| Error::InvalidArgument(format!("{}: no candidate {cand}", ex.id)))?;
    let p64: ParamStore<f64> = params.cast();
    let mut g = Graph::new(&p64);
    let out = model.forward_candidate(&mut g, c, &DropoutCtx::disabled())?;
    let per_layer: Vec<Vec<f64>> = out.alpha.iter().map(|&a| head_mean(g.value(a))).collect();
    let layers = per_layer
        .iter()
        .enumerate()
        .map(|(l, w)| LayerAttention {
            layer: l + 1,
            weights: incoming(&c.msgs, w, Subgraph::INTERACTION)
                .into_iter()
                .map(|(s, weight)| NodeWeight {
                    local: s,
                    global: c.subgraph.nodes[s].global,
                    weight,
                })
                .collect(),
        })
        .collect();
    let mut avg = vec![0.0; c.msgs.len()];
    for w in &per_layer {
        for (a, x) in avg.iter_mut().zip(w) {
            *a += x / per_layer.len().max(1) as f64;
        }
    }
    let order = best_first(&c.msgs, &avg, Subgraph::INTERACTION);
    Ok(Trace {
        example_id: ex.id.clone(),
        candidate: cand,
        layers,
        best_first_global: order.iter().map(|&i| c.subgraph.nodes[i].global).collect(),
        best_first: order,
    })
}
