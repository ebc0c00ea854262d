//! Per-example subgraph retrieval: entity linking, 2-hop bridges, relevance
//! scoring, top-K pruning and edge induction around an interaction node.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::text::tokenize;

pub const DEFAULT_TOP_K: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Context,
    Question,
    Answer,
    Bridge,
    Interaction,
}

impl NodeType {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    /// Precedence when a node is linked from several segments.
    fn rank(self) -> u8 {
        match self {
            NodeType::Answer => 3,
            NodeType::Question => 2,
            NodeType::Context => 1,
            NodeType::Bridge | NodeType::Interaction => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    #[default]
    LinkedOnly,
    AllNodes,
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linked_only" => Ok(Self::LinkedOnly),
            "all_nodes" => Ok(Self::AllNodes),
            _ => Err(Error::Config(format!("unknown connectivity mode `{s}`"))),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinkedOnly => "linked_only",
            Self::AllNodes => "all_nodes",
        })
    }
}

/// Relation label of a subgraph edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeRel {
    Kg(u32),
    Interaction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubEdge {
    pub head: usize,
    pub rel: EdgeRel,
    pub tail: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubNode {
    /// KG id; `None` for the interaction node and the fallback dummy.
    pub global: Option<u32>,
    pub ty: NodeType,
}

/// Local id 0 is the interaction node; the other nodes follow in ascending
/// global id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: Vec<SubNode>,
    pub edges: Vec<SubEdge>,
    /// Local ids of linked nodes, ascending.
    pub linked: Vec<usize>,
}

impl Subgraph {
    pub const INTERACTION: usize = 0;

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when retrieval found nothing and a dummy node stands in.
    pub fn is_fallback(&self) -> bool {
        self.nodes.len() == 2 && self.nodes[1].global.is_none()
    }
}

/// The three text segments of one (context, question, candidate) input.
#[derive(Clone, Copy, Debug)]
pub struct Segments<'a> {
    pub context: &'a str,
    pub question: &'a str,
    pub answer: &'a str,
}

impl Segments<'_> {
    pub fn all_tokens(&self) -> Vec<String> {
        [self.context, self.question, self.answer]
            .iter()
            .flat_map(|s| tokenize(s))
            .collect()
    }
}

/// Name lookup for linking: token sequence → smallest node id with that name.
#[derive(Clone, Debug)]
pub struct Linker {
    names: HashMap<Vec<String>, u32>,
    max_len: usize,
}

impl Linker {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut names: HashMap<Vec<String>, u32> = HashMap::new();
        let mut max_len = 0;
        for (id, name) in kg.nodes() {
            let toks = tokenize(name);
            if toks.is_empty() {
                continue;
            }
            max_len = max_len.max(toks.len());
            names.entry(toks).and_modify(|e| *e = (*e).min(id)).or_insert(id);
        }
        Self { names, max_len }
    }

    /// Greedy leftmost-longest, non-overlapping matches, in text order.
    pub fn link_tokens(&self, tokens: &[String]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=self.max_len.min(tokens.len() - i))
                .rev()
                .find_map(|len| self.names.get(&tokens[i..i + len]).map(|&id| (id, len)));
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn link(&self, text: &str) -> BTreeSet<u32> {
        self.link_tokens(&tokenize(text)).into_iter().collect()
    }

    /// Links each segment separately; a node found in several segments takes
    /// the type answer > question > context.
    pub fn link_segments(&self, seg: &Segments) -> BTreeMap<u32, NodeType> {
        let mut out: BTreeMap<u32, NodeType> = BTreeMap::new();
        for (text, ty) in [
            (seg.context, NodeType::Context),
            (seg.question, NodeType::Question),
            (seg.answer, NodeType::Answer),
        ] {
            for id in self.link(text) {
                let e = out.entry(id).or_insert(ty);
                if ty.rank() > e.rank() {
                    *e = ty;
                }
            }
        }
        out
    }
}

pub fn link_entities(text: &str, kg: &KnowledgeGraph) -> BTreeSet<u32> {
    Linker::new(kg).link(text)
}

/// Linked nodes plus every node on a 2-hop path `u − b − v` between two
/// distinct linked nodes. With `directed`, the path must be `u → b → v`.
pub fn expand_bridges(linked: &BTreeSet<u32>, kg: &KnowledgeGraph, directed: bool) -> Result<BTreeSet<u32>> {
    let mut out = linked.clone();
    if directed {
        // b qualifies with an in-edge from linked u and an out-edge to linked v ≠ u.
        let mut sources: HashMap<u32, BTreeSet<u32>> = HashMap::new();
        for &u in linked {
            for n in kg.neighbors(u)? {
                if n.dir == crate::kg::Direction::Out {
                    sources.entry(n.node).or_default().insert(u);
                }
            }
        }
        for (b, srcs) in sources {
            let ok = kg.neighbors(b)?.iter().any(|n| {
                n.dir == crate::kg::Direction::Out && linked.contains(&n.node) && srcs.iter().any(|&u| u != n.node)
            });
            if ok {
                out.insert(b);
            }
        }
    } else {
        let mut touching: HashMap<u32, HashSet<u32>> = HashMap::new();
        for &u in linked {
            for n in kg.neighbors(u)? {
                touching.entry(n.node).or_default().insert(u);
            }
        }
        out.extend(touching.into_iter().filter(|(_, s)| s.len() >= 2).map(|(b, _)| b));
    }
    Ok(out)
}

/// Inputs shared by all score evaluations of one example.
#[derive(Clone, Debug)]
pub struct ScoreContext {
    pub text_tokens: BTreeSet<String>,
    /// Undirected hop distance from each retrieved node to the nearest linked node.
    pub distance: BTreeMap<u32, usize>,
}

impl ScoreContext {
    pub fn new(seg: &Segments, linked: &BTreeSet<u32>, retrieved: &BTreeSet<u32>, kg: &KnowledgeGraph) -> Result<Self> {
        Ok(Self {
            text_tokens: seg.all_tokens().into_iter().collect(),
            distance: distances_to_linked(linked, retrieved, kg)?,
        })
    }
}

/// Multi-source BFS from `linked`, stopping once every target is reached.
fn distances_to_linked(
    linked: &BTreeSet<u32>,
    targets: &BTreeSet<u32>,
    kg: &KnowledgeGraph,
) -> Result<BTreeMap<u32, usize>> {
    let mut dist: HashMap<u32, usize> = linked.iter().map(|&u| (u, 0)).collect();
    let mut queue: VecDeque<u32> = linked.iter().copied().collect();
    let mut remaining = targets.iter().filter(|t| !dist.contains_key(t)).count();
    while remaining > 0 {
        let Some(u) = queue.pop_front() else { break };
        let du = dist[&u];
        for n in kg.neighbors(u)? {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(n.node) {
                e.insert(du + 1);
                queue.push_back(n.node);
                if targets.contains(&n.node) {
                    remaining -= 1;
                }
            }
        }
    }
    Ok(targets.iter().filter_map(|t| dist.get(t).map(|&d| (*t, d))).collect())
}

/// Pluggable node relevance.
pub trait RelevanceScorer: Sync {
    fn score(&self, node: u32, ctx: &ScoreContext, kg: &KnowledgeGraph) -> Result<f64>;
}

/// `w_overlap · Jaccard(name tokens, text tokens) + w_proximity / (1 + d)`,
/// with `d` the hop distance to the nearest linked node.
#[derive(Clone, Copy, Debug)]
pub struct LexicalScorer {
    pub w_overlap: f64,
    pub w_proximity: f64,
}

impl Default for LexicalScorer {
    fn default() -> Self {
        Self {
            w_overlap: 1.0,
            w_proximity: 1.0,
        }
    }
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

impl RelevanceScorer for LexicalScorer {
    fn score(&self, node: u32, ctx: &ScoreContext, kg: &KnowledgeGraph) -> Result<f64> {
        let d = *ctx.distance.get(&node).ok_or(Error::NotRetrieved(node))?;
        let name = kg.name(node).ok_or(Error::UnknownNode(node))?;
        let toks: BTreeSet<String> = tokenize(name).into_iter().collect();
        Ok(self.w_overlap * jaccard(&toks, &ctx.text_tokens) + self.w_proximity / (1.0 + d as f64))
    }
}

/// Keeps the `k` best nodes ordered by score (descending), linked before
/// unlinked, then ascending id. Returns the kept set.
pub fn prune_topk(scores: &BTreeMap<u32, f64>, linked: &BTreeSet<u32>, k: usize) -> Result<BTreeSet<u32>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k must be at least 1".into()));
    }
    let mut order: Vec<(u32, f64)> = scores.iter().map(|(&n, &s)| (n, s)).collect();
    order.sort_by(|a, b| prune_order(a, b, linked));
    Ok(order.into_iter().take(k).map(|(n, _)| n).collect())
}

fn prune_order(a: &(u32, f64), b: &(u32, f64), linked: &BTreeSet<u32>) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| linked.contains(&b.0).cmp(&linked.contains(&a.0)))
        .then_with(|| a.0.cmp(&b.0))
}

/// Builds the local graph over `sub` plus the interaction node. An empty
/// `sub` yields a single isolated dummy node.
pub fn induce_subgraph(
    sub: &BTreeSet<u32>,
    linked: &BTreeMap<u32, NodeType>,
    kg: &KnowledgeGraph,
    mode: Connectivity,
) -> Result<Subgraph> {
    let mut nodes = vec![SubNode {
        global: None,
        ty: NodeType::Interaction,
    }];
    if sub.is_empty() {
        nodes.push(SubNode {
            global: None,
            ty: NodeType::Bridge,
        });
        return Ok(Subgraph {
            nodes,
            edges: Vec::new(),
            linked: Vec::new(),
        });
    }
    let local: HashMap<u32, usize> = sub.iter().enumerate().map(|(i, &g)| (g, i + 1)).collect();
    let mut linked_local = Vec::new();
    for &g in sub {
        let ty = linked.get(&g).copied().unwrap_or(NodeType::Bridge);
        if linked.contains_key(&g) {
            linked_local.push(nodes.len());
        }
        nodes.push(SubNode { global: Some(g), ty });
    }
    let mut edges = Vec::new();
    let attach: Vec<usize> = match mode {
        Connectivity::LinkedOnly => linked_local.clone(),
        Connectivity::AllNodes => (1..nodes.len()).collect(),
    };
    for t in attach {
        edges.push(SubEdge {
            head: Subgraph::INTERACTION,
            rel: EdgeRel::Interaction,
            tail: t,
        });
    }
    for &g in sub {
        for n in kg.neighbors(g)? {
            if n.dir == crate::kg::Direction::Out {
                if let Some(&t) = local.get(&n.node) {
                    edges.push(SubEdge {
                        head: local[&g],
                        rel: EdgeRel::Kg(n.rel),
                        tail: t,
                    });
                }
            }
        }
    }
    Ok(Subgraph {
        nodes,
        edges,
        linked: linked_local,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub connectivity: Connectivity,
    pub directed_bridges: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            connectivity: Connectivity::LinkedOnly,
            directed_bridges: false,
        }
    }
}

/// Link → bridge → score → prune → induce.
pub fn retrieve(
    seg: &Segments,
    kg: &KnowledgeGraph,
    linker: &Linker,
    cfg: &RetrievalConfig,
    scorer: &dyn RelevanceScorer,
) -> Result<Subgraph> {
    let typed = linker.link_segments(seg);
    let linked: BTreeSet<u32> = typed.keys().copied().collect();
    let retrieved = expand_bridges(&linked, kg, cfg.directed_bridges)?;
    let ctx = ScoreContext::new(seg, &linked, &retrieved, kg)?;
    let mut scores = BTreeMap::new();
    for &n in &retrieved {
        scores.insert(n, scorer.score(n, &ctx, kg)?);
    }
    let kept = prune_topk(&scores, &linked, cfg.top_k)?;
    induce_subgraph(&kept, &typed, kg, cfg.connectivity)
}

/// JSON Lines cache record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub example_id: String,
    pub nodes: Vec<CacheNode>,
    /// `[head, relation, tail]`; relation `-1` marks interaction edges.
    pub edges: Vec<[i64; 3]>,
    pub linked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheNode {
    pub local: usize,
    pub global: Option<u32>,
    #[serde(rename = "type")]
    pub ty: NodeType,
}

impl CacheRecord {
    pub fn from_subgraph(example_id: &str, sg: &Subgraph) -> Self {
        Self {
            example_id: example_id.to_string(),
            nodes: sg
                .nodes
                .iter()
                .enumerate()
                .map(|(local, n)| CacheNode {
                    local,
                    global: n.global,
                    ty: n.ty,
                })
                .collect(),
            edges: sg
                .edges
                .iter()
                .map(|e| {
                    let r = match e.rel {
                        EdgeRel::Kg(r) => r as i64,
                        EdgeRel::Interaction => -1,
                    };
                    [e.head as i64, r, e.tail as i64]
                })
                .collect(),
            linked: sg.linked.clone(),
        }
    }

    pub fn to_subgraph(&self) -> Result<Subgraph> {
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.local != i {
                return Err(Error::InvalidArgument(format!(
                    "{}: node {} listed at position {i}",
                    self.example_id, node.local
                )));
            }
        }
        let mut edges = Vec::with_capacity(self.edges.len());
        for &[h, r, t] in &self.edges {
            if h < 0 || t < 0 || h as usize >= n || t as usize >= n || r < -1 {
                return Err(Error::InvalidArgument(format!(
                    "{}: bad edge [{h}, {r}, {t}]",
                    self.example_id
                )));
            }
            edges.push(SubEdge {
                head: h as usize,
                rel: if r == -1 {
                    EdgeRel::Interaction
                } else {
                    EdgeRel::Kg(r as u32)
                },
                tail: t as usize,
            });
        }
        Ok(Subgraph {
            nodes: self
                .nodes
                .iter()
                .map(|c| SubNode {
                    global: c.global,
                    ty: c.ty,
                })
                .collect(),
            edges,
            linked: self.linked.clone(),
        })
    }
}
