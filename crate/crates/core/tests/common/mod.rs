//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use greaselm::data::{gen_synthetic_mcqa, QAExample, SynthConfig};
use greaselm::gnn::Messages;
use greaselm::kg::{Edge, KnowledgeGraph};
use greaselm::model::{build_vocab, graph_dims, GreaseLm, ModelDims, PreparedExample, RunConfig};
use greaselm::numerics::ParamStore;
use greaselm::retrieval::{Connectivity, EdgeRel, NodeType, SubEdge, SubNode, Subgraph};
use greaselm::text::{tokenize, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(pairs: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::desk();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

/// N=1, M=2, d_lm=16, d_gnn=8, dropout off.
pub fn tiny() -> RunConfig {
    config(&[
        ("N", "1"),
        ("M", "2"),
        ("d_lm", "16"),
        ("d_gnn", "8"),
        ("lm_ffn_hidden", "32"),
        ("mlp_hidden", "8"),
        ("mint_hidden", "16"),
        ("dropout", "0"),
        ("max_tokens", "48"),
    ])
}

pub fn synth(seed: u64, n: usize, k: usize, neg: f64) -> Vec<QAExample> {
    gen_synthetic_mcqa(&SynthConfig {
        seed,
        n_examples: n,
        k_way: k,
        negation_rate: neg,
        hedge_rate: 0.2,
    })
    .unwrap()
}

pub struct Setup {
    pub model: GreaseLm,
    pub params: ParamStore<f32>,
    pub vocab: Vocabulary,
    pub sets: Vec<Vec<PreparedExample>>,
}

/// Builds a model sized for the union of `sets` and prepares each set.
pub fn setup(cfg: &RunConfig, sets: &[&[QAExample]]) -> Setup {
    let all: Vec<QAExample> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
    let vocab = build_vocab(&all);
    let (nodes, rels) = graph_dims(&all, None);
    let dims = ModelDims {
        vocab_size: vocab.len(),
        kg_nodes: nodes,
        kg_relations: rels,
    };
    let (model, params) = GreaseLm::build(cfg, dims).unwrap();
    let sets = sets
        .iter()
        .map(|s| model.prepare_all(s, &vocab, None).unwrap())
        .collect();
    Setup {
        model,
        params,
        vocab,
        sets,
    }
}

const WORDS: [&str; 8] = ["red", "fox", "runs", "old", "tree", "blue", "sea", "cat"];

/// Random graph of at most 30 nodes whose names are 1–3 words from a small
/// pool, so multi-word and nested names and duplicates occur.
pub fn random_graph(rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    let n = rng.gen_range(2..=30);
    let nodes: Vec<(u32, String)> = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=3);
            let name: Vec<&str> = (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect();
            (i as u32 * 2 + rng.gen_range(0..2), name.join(" "))
        })
        .collect();
    let ids: Vec<u32> = nodes.iter().map(|n| n.0).collect();
    let n_rel = rng.gen_range(1..=3u32);
    let density = rng.gen_range(0.02..0.2);
    let mut edges = Vec::new();
    for &h in &ids {
        for &t in &ids {
            for r in 0..n_rel {
                if h != t && rng.gen_bool(density) {
                    edges.push(Edge {
                        head: h,
                        rel: r,
                        tail: t,
                    });
                }
            }
        }
    }
    let rels = (0..n_rel).map(|r| (r, format!("r{r}")));
    KnowledgeGraph::new(nodes, rels, edges).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..8);
    let mut pool: Vec<&str> = WORDS.to_vec();
    pool.extend(["the", "and", "?", ","]);
    (0..n).map(|_| *pool.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Span scan: at each start, every span is compared as a joined string
/// against every node name; the longest match wins, the smaller id on
/// duplicate names.
pub fn ref_link(text: &str, kg: &KnowledgeGraph) -> BTreeSet<u32> {
    let toks = tokenize(text);
    let names: Vec<(u32, String)> = kg.nodes().map(|(id, name)| (id, tokenize(name).join(" "))).collect();
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < toks.len() {
        let mut best: Option<(usize, u32)> = None;
        for j in i + 1..=toks.len() {
            let span = toks[i..j].join(" ");
            for (id, name) in &names {
                if *name == span {
                    best = match best {
                        Some((l, b)) if l == j - i => Some((l, b.min(*id))),
                        _ => Some((j - i, *id)),
                    };
                }
            }
        }
        match best {
            Some((len, id)) => {
                out.insert(id);
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

fn has_edge(kg: &KnowledgeGraph, a: u32, b: u32) -> bool {
    kg.edges().iter().any(|e| e.head == a && e.tail == b)
}

/// Triple loop over linked pairs and all nodes.
pub fn ref_bridges(linked: &BTreeSet<u32>, kg: &KnowledgeGraph, directed: bool) -> BTreeSet<u32> {
    let mut out = linked.clone();
    for &u in linked {
        for &v in linked {
            if u == v {
                continue;
            }
            for (b, _) in kg.nodes() {
                let ok = if directed {
                    has_edge(kg, u, b) && has_edge(kg, b, v)
                } else {
                    (has_edge(kg, u, b) || has_edge(kg, b, u)) && (has_edge(kg, b, v) || has_edge(kg, v, b))
                };
                if ok {
                    out.insert(b);
                }
            }
        }
    }
    out
}

/// Single-source BFS from `node` over the undirected edge list.
fn ref_distance(node: u32, linked: &BTreeSet<u32>, kg: &KnowledgeGraph) -> usize {
    let mut seen = BTreeSet::from([node]);
    let mut q = VecDeque::from([(node, 0)]);
    while let Some((u, d)) = q.pop_front() {
        if linked.contains(&u) {
            return d;
        }
        for e in kg.edges() {
            let next = if e.head == u {
                e.tail
            } else if e.tail == u {
                e.head
            } else {
                continue;
            };
            if seen.insert(next) {
                q.push_back((next, d + 1));
            }
        }
    }
    panic!("node {node} unreachable from linked set")
}

pub fn ref_score(node: u32, text_tokens: &BTreeSet<String>, linked: &BTreeSet<u32>, kg: &KnowledgeGraph) -> f64 {
    let name: BTreeSet<String> = tokenize(kg.name(node).unwrap()).into_iter().collect();
    let inter = name.intersection(text_tokens).count() as f64;
    let union = name.union(text_tokens).count() as f64;
    let jac = if union == 0.0 { 0.0 } else { inter / union };
    jac + 1.0 / (1.0 + ref_distance(node, linked, kg) as f64)
}

/// Stable sort by id, then a stable sort on the documented comparator.
pub fn ref_prune(scores: &[(u32, f64)], linked: &BTreeSet<u32>, k: usize) -> BTreeSet<u32> {
    let mut v = scores.to_vec();
    v.sort_by_key(|x| x.0);
    v.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(linked.contains(&b.0).cmp(&linked.contains(&a.0)))
    });
    v.into_iter().take(k).map(|x| x.0).collect()
}

pub fn ref_retrieve(
    context: &str,
    question: &str,
    answer: &str,
    kg: &KnowledgeGraph,
    top_k: usize,
    mode: Connectivity,
    directed: bool,
) -> Subgraph {
    let mut typed: BTreeMap<u32, NodeType> = BTreeMap::new();
    for (text, ty) in [
        (context, NodeType::Context),
        (question, NodeType::Question),
        (answer, NodeType::Answer),
    ] {
        // Later segments take precedence.
        for id in ref_link(text, kg) {
            typed.insert(id, ty);
        }
    }
    let linked: BTreeSet<u32> = typed.keys().copied().collect();
    let retrieved = ref_bridges(&linked, kg, directed);
    let text_tokens: BTreeSet<String> = [context, question, answer].iter().flat_map(|t| tokenize(t)).collect();
    let scores: Vec<(u32, f64)> = retrieved
        .iter()
        .map(|&n| (n, ref_score(n, &text_tokens, &linked, kg)))
        .collect();
    let kept = ref_prune(&scores, &linked, top_k);

    let mut nodes = vec![SubNode {
        global: None,
        ty: NodeType::Interaction,
    }];
    if kept.is_empty() {
        nodes.push(SubNode {
            global: None,
            ty: NodeType::Bridge,
        });
        return Subgraph {
            nodes,
            edges: vec![],
            linked: vec![],
        };
    }
    let order: Vec<u32> = kept.iter().copied().collect();
    let local = |g: u32| order.iter().position(|&x| x == g).unwrap() + 1;
    let mut linked_local = Vec::new();
    for &g in &order {
        let ty = typed.get(&g).copied().unwrap_or(NodeType::Bridge);
        if typed.contains_key(&g) {
            linked_local.push(local(g));
        }
        nodes.push(SubNode { global: Some(g), ty });
    }
    let mut edges = Vec::new();
    for i in 1..nodes.len() {
        if mode == Connectivity::AllNodes || linked_local.contains(&i) {
            edges.push(SubEdge {
                head: 0,
                rel: EdgeRel::Interaction,
                tail: i,
            });
        }
    }
    let mut kg_edges: Vec<SubEdge> = kg
        .edges()
        .iter()
        .filter(|e| kept.contains(&e.head) && kept.contains(&e.tail))
        .map(|e| SubEdge {
            head: local(e.head),
            rel: EdgeRel::Kg(e.rel),
            tail: local(e.tail),
        })
        .collect();
    kg_edges.sort_by_key(|e| (e.head, e.tail, e.rel));
    edges.extend(kg_edges);
    Subgraph {
        nodes,
        edges,
        linked: linked_local,
    }
}

/// Repeatedly visits the unvisited node with the highest priority, where a
/// node's priority is the largest weight any visited node gives it.
pub fn ref_best_first(msgs: &Messages, weights: &[f64], start: usize) -> Vec<usize> {
    let mut order = vec![start];
    loop {
        let mut best: Option<(f64, usize)> = None;
        for m in 0..msgs.len() {
            let (s, u) = (msgs.src[m], msgs.dst[m]);
            if order.contains(&u) && !order.contains(&s) {
                let better = match best {
                    None => true,
                    Some((w, id)) => weights[m] > w || (weights[m] == w && s < id),
                };
                if better {
                    best = Some((weights[m], s));
                }
            }
        }
        match best {
            Some((_, s)) => order.push(s),
            None => return order,
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
