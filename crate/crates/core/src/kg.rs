//! Global knowledge graph: nodes, relations and typed directed edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NODES_FILE: &str = "nodes.tsv";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const EDGES_FILE: &str = "edges.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub head: u32,
    pub rel: u32,
    pub tail: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Neighbor {
    pub node: u32,
    pub rel: u32,
    pub dir: Direction,
}

/// Lowercase, underscores to spaces, runs of whitespace collapsed.
pub fn normalize_name(name: &str) -> String {
    name.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<u32, String>,
    relations: BTreeMap<u32, String>,
    edges: Vec<Edge>,
    adjacency: HashMap<u32, Vec<Neighbor>>,
}

impl KnowledgeGraph {
    /// Validates and indexes. Edges are stored sorted, so the result does not
    /// depend on input order.
    pub fn new(
        nodes: impl IntoIterator<Item = (u32, String)>,
        relations: impl IntoIterator<Item = (u32, String)>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self> {
        let mut node_map = BTreeMap::new();
        for (id, name) in nodes {
            let norm = normalize_name(&name);
            if norm.is_empty() {
                return Err(Error::InvalidArgument(format!("node {id} has an empty name")));
            }
            if node_map.insert(id, norm).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate node id {id}")));
            }
        }
        let mut rel_map = BTreeMap::new();
        for (id, name) in relations {
            if rel_map.insert(id, name).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate relation id {id}")));
            }
        }
        let mut set = BTreeSet::new();
        for e in edges {
            check_edge(&node_map, &rel_map, &e)?;
            if !set.insert(e) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate triple ({}, {}, {})",
                    e.head, e.rel, e.tail
                )));
            }
        }
        Ok(Self::index(node_map, rel_map, set.into_iter().collect()))
    }

    fn index(nodes: BTreeMap<u32, String>, relations: BTreeMap<u32, String>, edges: Vec<Edge>) -> Self {
        let mut adjacency: HashMap<u32, Vec<Neighbor>> = HashMap::new();
        for e in &edges {
            adjacency.entry(e.head).or_default().push(Neighbor {
                node: e.tail,
                rel: e.rel,
                dir: Direction::Out,
            });
            adjacency.entry(e.tail).or_default().push(Neighbor {
                node: e.head,
                rel: e.rel,
                dir: Direction::In,
            });
        }
        for list in adjacency.values_mut() {
            list.sort();
        }
        Self {
            nodes,
            relations,
            edges,
            adjacency,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// One past the largest node id (size of a dense per-node table).
    pub fn node_id_bound(&self) -> usize {
        self.nodes.keys().next_back().map_or(0, |&m| m as usize + 1)
    }

    /// One past the largest relation id.
    pub fn relation_id_bound(&self) -> usize {
        self.relations.keys().next_back().map_or(0, |&m| m as usize + 1)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn nodes(&self) -> impl Iterator<Item = (u32, &str)> {
        self.nodes.iter().map(|(&id, n)| (id, n.as_str()))
    }

    pub fn relations(&self) -> impl Iterator<Item = (u32, &str)> {
        self.relations.iter().map(|(&id, n)| (id, n.as_str()))
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.nodes.get(&id).map(String::as_str)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.nodes.contains_key(&id)
    }

    /// Adjacency entries of `node`, ordered by (neighbor id, relation id).
    pub fn neighbors(&self, node: u32) -> Result<&[Neighbor]> {
        if !self.contains(node) {
            return Err(Error::UnknownNode(node));
        }
        Ok(self.adjacency.get(&node).map_or(&[][..], Vec::as_slice))
    }

    /// Whether an edge joins `a` and `b` in either direction.
    pub fn adjacent(&self, a: u32, b: u32) -> bool {
        self.adjacency.get(&a).is_some_and(|l| l.iter().any(|n| n.node == b))
    }

    /// Whether a directed edge `a → b` exists.
    pub fn has_edge_from(&self, a: u32, b: u32) -> bool {
        self.adjacency
            .get(&a)
            .is_some_and(|l| l.iter().any(|n| n.node == b && n.dir == Direction::Out))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut nodes = String::new();
        for (id, name) in &self.nodes {
            nodes.push_str(&format!("{id}\t{name}\n"));
        }
        let mut rels = String::new();
        for (id, name) in &self.relations {
            rels.push_str(&format!("{id}\t{name}\n"));
        }
        let mut edges = String::new();
        for e in &self.edges {
            edges.push_str(&format!("{}\t{}\t{}\n", e.head, e.rel, e.tail));
        }
        for (file, body) in [(NODES_FILE, nodes), (RELATIONS_FILE, rels), (EDGES_FILE, edges)] {
            let p = dir.join(file);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        load_kg(&dir.join(NODES_FILE), &dir.join(RELATIONS_FILE), &dir.join(EDGES_FILE))
    }
}

fn check_edge(nodes: &BTreeMap<u32, String>, rels: &BTreeMap<u32, String>, e: &Edge) -> Result<()> {
    for id in [e.head, e.tail] {
        if !nodes.contains_key(&id) {
            return Err(Error::UnknownNode(id));
        }
    }
    if !rels.contains_key(&e.rel) {
        return Err(Error::InvalidArgument(format!("unknown relation id {}", e.rel)));
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .split('\n')
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_id(path: &Path, line: usize, s: &str) -> Result<u32> {
    s.parse().map_err(|_| parse_err(path, line, format!("bad id `{s}`")))
}

fn parse_named(path: &Path) -> Result<Vec<(u32, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, l) in read_lines(path)? {
        let (id, name) = l
            .split_once('\t')
            .ok_or_else(|| parse_err(path, line, "expected `<id>\\t<name>`"))?;
        let id = parse_id(path, line, id)?;
        if !seen.insert(id) {
            return Err(parse_err(path, line, format!("duplicate id {id}")));
        }
        if normalize_name(name).is_empty() {
            return Err(parse_err(path, line, "empty name"));
        }
        out.push((id, name.to_string()));
    }
    Ok(out)
}

/// Loads the three TSV files. Errors carry the offending file and line.
pub fn load_kg(node_file: &Path, relation_file: &Path, edge_file: &Path) -> Result<KnowledgeGraph> {
    let nodes = parse_named(node_file)?;
    let rels = parse_named(relation_file)?;
    let node_ids: BTreeSet<u32> = nodes.iter().map(|(i, _)| *i).collect();
    let rel_ids: BTreeSet<u32> = rels.iter().map(|(i, _)| *i).collect();

    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, l) in read_lines(edge_file)? {
        let parts: Vec<&str> = l.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(edge_file, line, "expected `<head>\\t<rel>\\t<tail>`"));
        }
        let e = Edge {
            head: parse_id(edge_file, line, parts[0])?,
            rel: parse_id(edge_file, line, parts[1])?,
            tail: parse_id(edge_file, line, parts[2])?,
        };
        for id in [e.head, e.tail] {
            if !node_ids.contains(&id) {
                return Err(parse_err(edge_file, line, format!("unknown node id {id}")));
            }
        }
        if !rel_ids.contains(&e.rel) {
            return Err(parse_err(edge_file, line, format!("unknown relation id {}", e.rel)));
        }
        if !seen.insert(e) {
            return Err(parse_err(edge_file, line, "duplicate triple"));
        }
        edges.push(e);
    }
    KnowledgeGraph::new(nodes, rels, edges)
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable single-token name for entity `i`: three
/// consonant-vowel syllables, distinct for every `i < 70³`.
pub fn entity_name(i: usize) -> String {
    let syl = |k: usize| format!("{}{}", ONSETS[k % 14], VOWELS[(k / 14) % 5]);
    // 3 is coprime with 70, so the leading syllable cycles through all values.
    let a = (i * 3) % 70;
    let b = (i / 70) % 70;
    let c = (i / 4900) % 70;
    format!("{}{}{}", syl(a), syl(b), syl(c))
}

/// Random toy graph. A random spanning tree is always included, so the
/// undirected graph is connected; every other ordered pair (u ≠ v) gets an
/// edge of relation `r` independently with probability `edge_density`.
pub fn gen_toy_kg(seed: u64, n_nodes: usize, n_relations: usize, edge_density: f64) -> Result<KnowledgeGraph> {
    if n_nodes < 2 || n_relations < 1 || !(edge_density > 0.0 && edge_density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need n_nodes >= 2, n_relations >= 1, density in (0, 1]; got {n_nodes}, {n_relations}, {edge_density}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = BTreeSet::new();
    for v in 1..n_nodes as u32 {
        let u = rng.gen_range(0..v);
        let rel = rng.gen_range(0..n_relations as u32);
        let e = if rng.gen_bool(0.5) {
            Edge { head: u, rel, tail: v }
        } else {
            Edge { head: v, rel, tail: u }
        };
        edges.insert(e);
    }
    for head in 0..n_nodes as u32 {
        for tail in 0..n_nodes as u32 {
            if head == tail {
                continue;
            }
            for rel in 0..n_relations as u32 {
                if rng.gen::<f64>() < edge_density {
                    edges.insert(Edge { head, rel, tail });
                }
            }
        }
    }
    KnowledgeGraph::new(
        (0..n_nodes as u32).map(|i| (i, entity_name(i as usize))),
        (0..n_relations as u32).map(|r| (r, format!("rel{r}"))),
        edges,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn fixture() -> KnowledgeGraph {
        KnowledgeGraph::new(
            [(0, "Red_Fox".to_string()), (1, "hen".into()), (2, "coop".into())],
            [(0, "eats".to_string())],
            [
                Edge {
                    head: 0,
                    rel: 0,
                    tail: 1,
                },
                Edge {
                    head: 1,
                    rel: 0,
                    tail: 2,
                },
            ],
        )
        .unwrap()
    }

    fn write(dir: &Path, nodes: &str, rels: &str, edges: &str) {
        fs::write(dir.join(NODES_FILE), nodes).unwrap();
        fs::write(dir.join(RELATIONS_FILE), rels).unwrap();
        fs::write(dir.join(EDGES_FILE), edges).unwrap();
    }

    #[test]
    fn loads_small_fixture() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "0\ta\n1\tb\n2\tc\n", "0\tr\n", "0\t0\t1\n1\t0\t2\n");
        let kg = KnowledgeGraph::load_dir(d.path()).unwrap();
        assert_eq!(kg.num_nodes(), 3);
        assert_eq!(kg.edges().len(), 2);
    }

    #[test]
    fn dangling_edge_reports_line() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "0\ta\n1\tb\n", "0\tr\n", "0\t0\t1\n1\t0\t7\n");
        let err = KnowledgeGraph::load_dir(d.path()).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains('7'));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_triple_rejected() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "0\ta\n1\tb\n", "0\tr\n", "0\t0\t1\n0\t0\t1\n");
        assert!(matches!(
            KnowledgeGraph::load_dir(d.path()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn names_are_normalized() {
        assert_eq!(fixture().name(0), Some("red fox"));
        assert_eq!(normalize_name("  Big__Red   Fox "), "big red fox");
    }

    #[test]
    fn load_is_order_independent() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write(a.path(), "0\ta\n1\tb\n2\tc\n", "0\tr\n", "0\t0\t1\n1\t0\t2\n");
        write(b.path(), "2\tc\n0\ta\n1\tb\n", "0\tr\n", "1\t0\t2\n0\t0\t1\n");
        assert_eq!(
            KnowledgeGraph::load_dir(a.path()).unwrap(),
            KnowledgeGraph::load_dir(b.path()).unwrap()
        );
    }

    #[test]
    fn toy_kg_round_trips_bit_identically() {
        let kg = gen_toy_kg(5, 25, 3, 0.1).unwrap();
        let d = tempfile::tempdir().unwrap();
        kg.save(d.path()).unwrap();
        let back = KnowledgeGraph::load_dir(d.path()).unwrap();
        assert_eq!(kg, back);
        let d2 = tempfile::tempdir().unwrap();
        back.save(d2.path()).unwrap();
        for f in [NODES_FILE, RELATIONS_FILE, EDGES_FILE] {
            assert_eq!(
                fs::read(d.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn toy_kg_is_deterministic() {
        assert_eq!(gen_toy_kg(1, 10, 3, 0.2).unwrap(), gen_toy_kg(1, 10, 3, 0.2).unwrap());
        assert_ne!(gen_toy_kg(1, 10, 3, 0.2).unwrap(), gen_toy_kg(2, 10, 3, 0.2).unwrap());
    }

    #[test]
    fn full_density_is_complete_digraph() {
        let kg = gen_toy_kg(0, 4, 1, 1.0).unwrap();
        assert_eq!(kg.edges().len(), 12);
        assert!(kg.edges().iter().all(|e| e.head != e.tail));
    }

    #[test]
    fn toy_kg_param_validation() {
        assert!(gen_toy_kg(0, 1, 1, 0.5).is_err());
        assert!(gen_toy_kg(0, 5, 0, 0.5).is_err());
        assert!(gen_toy_kg(0, 5, 1, 0.0).is_err());
        assert!(gen_toy_kg(0, 5, 1, 1.5).is_err());
    }

    #[test]
    fn toy_kg_is_connected_by_bfs() {
        for seed in 0..20 {
            let kg = gen_toy_kg(seed, 30, 2, 0.01).unwrap();
            // BFS over the raw edge list, ignoring direction.
            let mut seen = [false; 30];
            let mut q = VecDeque::from([0u32]);
            seen[0] = true;
            while let Some(u) = q.pop_front() {
                for e in kg.edges() {
                    let other = if e.head == u {
                        e.tail
                    } else if e.tail == u {
                        e.head
                    } else {
                        continue;
                    };
                    if !seen[other as usize] {
                        seen[other as usize] = true;
                        q.push_back(other);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s), "seed {seed} disconnected");
        }
    }

    #[test]
    fn neighbors_cases() {
        let kg = KnowledgeGraph::new(
            [
                (0, "a".to_string()),
                (1, "b".into()),
                (2, "c".into()),
                (3, "lonely".into()),
            ],
            [(0, "r".to_string())],
            [
                Edge {
                    head: 0,
                    rel: 0,
                    tail: 1,
                },
                Edge {
                    head: 2,
                    rel: 0,
                    tail: 0,
                },
            ],
        )
        .unwrap();
        assert!(kg.neighbors(3).unwrap().is_empty());
        let n = kg.neighbors(0).unwrap();
        assert_eq!(
            n,
            &[
                Neighbor {
                    node: 1,
                    rel: 0,
                    dir: Direction::Out
                },
                Neighbor {
                    node: 2,
                    rel: 0,
                    dir: Direction::In
                },
            ]
        );
        assert!(matches!(kg.neighbors(9), Err(Error::UnknownNode(9))));
        assert!(kg.adjacent(0, 2) && kg.adjacent(2, 0) && !kg.adjacent(1, 2));
    }

    #[test]
    fn entity_names_distinct() {
        let names: BTreeSet<String> = (0..1000).map(entity_name).collect();
        assert_eq!(names.len(), 1000);
    }

    proptest! {
        #[test]
        fn neighbor_union_reproduces_edges(seed in 0u64..500, n in 2usize..15, density in 0.01f64..0.5) {
            let kg = gen_toy_kg(seed, n, 3, density).unwrap();
            let mut out_count = 0;
            let mut in_count = 0;
            let mut rebuilt = BTreeSet::new();
            for (v, _) in kg.nodes() {
                for nb in kg.neighbors(v).unwrap() {
                    match nb.dir {
                        Direction::Out => {
                            out_count += 1;
                            rebuilt.insert(Edge { head: v, rel: nb.rel, tail: nb.node });
                        }
                        Direction::In => {
                            in_count += 1;
                            let back = Neighbor { node: v, rel: nb.rel, dir: Direction::Out };
                            prop_assert!(kg.neighbors(nb.node).unwrap().contains(&back));
                        }
                    }
                }
                let list = kg.neighbors(v).unwrap();
                prop_assert!(list.windows(2).all(|w| (w[0].node, w[0].rel) <= (w[1].node, w[1].rel)));
            }
            prop_assert_eq!(out_count, kg.edges().len());
            prop_assert_eq!(in_count, kg.edges().len());
            let expected: BTreeSet<Edge> = kg.edges().iter().copied().collect();
            prop_assert_eq!(rebuilt, expected);
        }
    }
}
