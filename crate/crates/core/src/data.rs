//! Multiple-choice examples, JSON Lines I/O and the synthetic fusion dataset.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{entity_name, Edge, KnowledgeGraph};
use crate::numerics::dropout::mix;
use crate::retrieval::Linker;
use crate::text::tokenize;

/// Size of the closed entity vocabulary.
pub const N_ENTITIES: usize = 200;
pub const N_SYNTH_RELATIONS: u32 = 4;
/// Context-only entities added to every synthetic example.
pub const N_FILLERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleKg {
    pub nodes: Vec<(u32, String)>,
    pub edges: Vec<[u32; 3]>,
}

impl ExampleKg {
    pub fn to_graph(&self) -> Result<KnowledgeGraph> {
        let rels: BTreeSet<u32> = self.edges.iter().map(|e| e[1]).collect();
        let max_rel = rels.iter().next_back().copied().unwrap_or(0);
        KnowledgeGraph::new(
            self.nodes.iter().cloned(),
            (0..=max_rel).map(|r| (r, format!("rel{r}"))),
            self.edges.iter().map(|&[head, rel, tail]| Edge { head, rel, tail }),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg: Option<ExampleKg>,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::InvalidArgument(format!("{}: fewer than 2 candidates", self.id)));
        }
        if self.label >= self.candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: label {} out of range for {} candidates",
                self.id,
                self.label,
                self.candidates.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.candidates.iter().collect();
        if distinct.len() != self.candidates.len() {
            return Err(Error::InvalidArgument(format!("{}: duplicate candidates", self.id)));
        }
        Ok(())
    }
}

pub fn to_jsonl(data: &[QAExample]) -> Result<String> {
    let mut s = String::new();
    for ex in data {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn save_dataset(data: &[QAExample], path: &Path) -> Result<()> {
    let s = to_jsonl(data)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<QAExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let ex: QAExample = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        ex.validate().map_err(|e| err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

const TEMPLATES: [(&str, &str); 4] = [
    (
        "which one is linked to {a} and {b} ?",
        "which one is not linked to {a} or {b} ?",
    ),
    ("what sits between {a} and {b} ?", "what does not sit near {a} or {b} ?"),
    (
        "which entity connects with {a} and with {b} ?",
        "which entity does not connect with {a} or with {b} ?",
    ),
    (
        "name the node next to {a} and {b} .",
        "name the node not next to {a} or {b} .",
    ),
];
const HEDGES: [&str; 2] = ["maybe", "sometimes"];
pub const NEGATION_WORD: &str = "not";

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_examples: usize,
    pub k_way: usize,
    pub negation_rate: f64,
    pub hedge_rate: f64,
}

/// Per-example generation record, kept alongside the text for oracles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthMeta {
    pub a: u32,
    pub b: u32,
    pub candidates: Vec<u32>,
    pub negated: bool,
    pub hedged: bool,
}

fn random_edge(rng: &mut ChaCha8Rng, u: u32, v: u32) -> [u32; 3] {
    let rel = rng.gen_range(0..N_SYNTH_RELATIONS);
    if rng.gen_bool(0.5) {
        [u, rel, v]
    } else {
        [v, rel, u]
    }
}

/// One example. Exactly one candidate is adjacent to both question entities
/// and exactly one to neither; the rest touch one of them. A plain question
/// asks for the first, a negated one for the second.
pub fn gen_example(seed: u64, index: usize, cfg: &SynthConfig) -> (QAExample, SynthMeta) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index as u64));
    let k = cfg.k_way;
    let mut pool: Vec<u32> = (0..N_ENTITIES as u32).collect();
    pool.shuffle(&mut rng);
    let (a, b) = (pool[0], pool[1]);
    let candidates: Vec<u32> = pool[2..2 + k].to_vec();
    let fillers: Vec<u32> = pool[2 + k..2 + k + N_FILLERS].to_vec();

    let negated = rng.gen_bool(cfg.negation_rate);
    let hedged = rng.gen_bool(cfg.hedge_rate);
    let label = rng.gen_range(0..k);

    let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut kg_edges = Vec::new();
    let mut add = |rng: &mut ChaCha8Rng, u: u32, v: u32, edges: &mut BTreeSet<(u32, u32)>| {
        if edges.insert((u.min(v), u.max(v))) {
            kg_edges.push(random_edge(rng, u, v));
        }
    };
    // One candidate touches both question entities, one touches neither;
    // the question decides which of the two is meant.
    let other = (label + rng.gen_range(1..k)) % k;
    let (both, neither) = if negated { (other, label) } else { (label, other) };
    for (i, &c) in candidates.iter().enumerate() {
        if i == both {
            add(&mut rng, a, c, &mut edges);
            add(&mut rng, c, b, &mut edges);
        } else if i != neither {
            let q = if rng.gen_bool(0.5) { a } else { b };
            add(&mut rng, q, c, &mut edges);
        }
    }
    for &f in &fillers {
        let targets: Vec<u32> = [a, b].iter().chain(&candidates).copied().collect();
        let t = targets[rng.gen_range(0..targets.len())];
        add(&mut rng, f, t, &mut edges);
    }
    kg_edges.sort();

    let mut nodes: Vec<(u32, String)> = [a, b]
        .iter()
        .chain(&candidates)
        .chain(&fillers)
        .map(|&i| (i, entity_name(i as usize)))
        .collect();
    nodes.sort();

    let (plain, neg) = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
    let mut question = if negated { neg } else { plain }
        .replace("{a}", &entity_name(a as usize))
        .replace("{b}", &entity_name(b as usize));
    if hedged {
        question = format!("{} , {question}", HEDGES[rng.gen_range(0..HEDGES.len())]);
    }
    let context = format!(
        "we also know {} .",
        fillers
            .iter()
            .map(|&f| entity_name(f as usize))
            .collect::<Vec<_>>()
            .join(" , ")
    );
    let ex = QAExample {
        id: format!("s{seed}-{index}"),
        context,
        question,
        candidates: candidates.iter().map(|&c| entity_name(c as usize)).collect(),
        label,
        kg: Some(ExampleKg { nodes, edges: kg_edges }),
    };
    let meta = SynthMeta {
        a,
        b,
        candidates,
        negated,
        hedged,
    };
    (ex, meta)
}

pub fn gen_synthetic_mcqa_with_meta(cfg: &SynthConfig) -> Result<Vec<(QAExample, SynthMeta)>> {
    if !(4..=5).contains(&cfg.k_way) {
        return Err(Error::InvalidArgument(format!(
            "k_way must be 4 or 5, got {}",
            cfg.k_way
        )));
    }
    for (name, r) in [("negation_rate", cfg.negation_rate), ("hedge_rate", cfg.hedge_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("{name} {r} outside [0, 1]")));
        }
    }
    Ok((0..cfg.n_examples)
        .into_par_iter()
        .map(|i| gen_example(cfg.seed, i, cfg))
        .collect())
}

pub fn gen_synthetic_mcqa(cfg: &SynthConfig) -> Result<Vec<QAExample>> {
    Ok(gen_synthetic_mcqa_with_meta(cfg)?.into_iter().map(|(e, _)| e).collect())
}

/// Reads the question entities and the negation flag from the text, then
/// picks the candidate adjacent to both question entities, or to neither
/// when negated. Returns `None` when no unique such candidate exists.
pub fn rule_solve(ex: &QAExample) -> Result<Option<usize>> {
    let Some(kg) = &ex.kg else {
        return Err(Error::InvalidArgument(format!("{}: no example graph", ex.id)));
    };
    let kg = kg.to_graph()?;
    let linker = Linker::new(&kg);
    let q_tokens = tokenize(&ex.question);
    let negated = q_tokens.iter().any(|t| t == NEGATION_WORD);
    let q_ents: Vec<u32> = linker.link_tokens(&q_tokens);
    if q_ents.len() != 2 {
        return Ok(None);
    }
    let mut hits = Vec::new();
    for (i, cand) in ex.candidates.iter().enumerate() {
        let ids = linker.link(cand);
        let Some(&c) = ids.iter().next() else { continue };
        let touches = q_ents.iter().filter(|&&q| kg.adjacent(q, c)).count();
        if touches == if negated { 0 } else { 2 } {
            hits.push(i);
        }
    }
    Ok(if hits.len() == 1 { Some(hits[0]) } else { None })
}
