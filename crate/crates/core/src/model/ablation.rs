//! Ablation suites: named config deltas trained over a shared seed set.

use std::collections::HashMap;

use rayon::prelude::*;

use super::config::{canonical_key, parse_pairs, RunConfig};
use crate::error::{Error, Result};

pub const BASE_LABEL: &str = "GreaseLM";

/// Row labels and deltas of the standard component ablation table.
pub const COMPONENT_SUITE: &str = "\
seeds = 0, 1, 2

[No interaction]
interaction_schedule = none

[Interaction in every other layer]
interaction_schedule = every_other_layer

[No parameter sharing]
share_mint = false

[M = 4]
greaselm_layers = 4

[M = 6]
greaselm_layers = 6

[M = 7]
greaselm_layers = 7

[Interaction node connected to all nodes in V_sub, not only V_linked]
connectivity_mode = all_nodes

[Random]
node_init_mode = random_fixed
";

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub delta: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Suite {
    /// `seeds = a, b, c` before the first `[Label]` section; each section
    /// lists `key = value` deltas. A key given twice with different values
    /// in one section is an error.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut seeds = vec![0, 1, 2];
        let mut variants: Vec<Variant> = Vec::new();
        let mut seen: HashMap<String, String> = HashMap::new();
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(label) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let label = label.trim();
                if label.is_empty() || label == BASE_LABEL || variants.iter().any(|v| v.label == label) {
                    return Err(err(i + 1, format!("bad or repeated section `{label}`")));
                }
                variants.push(Variant {
                    label: label.to_string(),
                    delta: Vec::new(),
                });
                seen.clear();
                continue;
            }
            let pairs = parse_pairs(line, origin).map_err(|_| err(i + 1, "expected `key = value`".into()))?;
            let (_, k, v) = pairs.into_iter().next().expect("one pair");
            match variants.last_mut() {
                None if k == "seeds" => {
                    seeds = v
                        .split(',')
                        .map(|s| s.trim().parse::<u64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err(i + 1, format!("bad seed list `{v}`")))?;
                    if seeds.is_empty() {
                        return Err(err(i + 1, "empty seed list".into()));
                    }
                }
                None => return Err(err(i + 1, format!("`{k}` outside a section"))),
                Some(var) => {
                    let canon = canonical_key(&k);
                    if let Some(prev) = seen.insert(canon, v.clone()) {
                        if prev != v {
                            return Err(err(i + 1, format!("conflicting deltas for `{k}` in [{}]", var.label)));
                        }
                        continue;
                    }
                    RunConfig::desk().set(&k, &v).map_err(|e| err(i + 1, e.to_string()))?;
                    var.delta.push((k, v));
                }
            }
        }
        Ok(Self { seeds, variants })
    }

    /// Base row first, then each variant, with its resolved config.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        let mut out = vec![(BASE_LABEL.to_string(), base.clone())];
        for v in &self.variants {
            let mut c = base.clone();
            for (k, val) in &v.delta {
                c.set(k, val)?;
            }
            c.validate()?;
            out.push((v.label.clone(), c));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation (0 for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Trains every (variant, seed) pair with `run`, which returns accuracy.
pub fn run_ablation<F>(base: &RunConfig, suite: &Suite, run: F) -> Result<Vec<AblationRow>>
where
    F: Fn(&RunConfig) -> Result<f64> + Sync,
{
    let configs = suite.configs(base)?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|v| suite.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let mut c = configs[v].1.clone();
            c.seed = s;
            run(&c)
        })
        .collect::<Result<_>>()?;
    Ok(configs
        .iter()
        .enumerate()
        .map(|(v, (label, _))| AblationRow {
            label: label.clone(),
            accuracies: jobs
                .iter()
                .zip(&accs)
                .filter(|((jv, _), _)| *jv == v)
                .map(|(_, &a)| a)
                .collect(),
            seeds: suite.seeds.clone(),
        })
        .collect())
}

pub fn report_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tmean_acc\tstd\tseeds\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{}\n",
            r.label,
            r.mean(),
            r.std(),
            seeds.join(",")
        ));
    }
    s
}
