//! Run configuration: every hyperparameter, named presets and the flat
//! `key = value` file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::Schedule;
use crate::gnn::NodeInitMode;
use crate::retrieval::{Connectivity, RetrievalConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adam,
    RAdam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Unimodal LM layers (N).
    pub lm_layers: usize,
    /// Cross-modal layers (M).
    pub greaselm_layers: usize,
    pub d_lm: usize,
    pub d_gnn: usize,
    pub lm_heads: usize,
    pub gnn_heads: usize,
    pub lm_ffn_hidden: usize,
    /// Hidden width of every 2-layer MLP except MInt and the LM feed-forward.
    pub mlp_hidden: usize,
    pub mint_hidden: usize,
    pub dropout: f64,
    pub share_mint: bool,
    pub interaction_schedule: Schedule,
    pub connectivity_mode: Connectivity,
    pub node_init_mode: NodeInitMode,
    pub directed_bridges: bool,
    pub pool_include_int: bool,
    pub top_k_nodes: usize,
    pub max_tokens: usize,
    pub lr_lm: f64,
    pub lr_other: f64,
    pub freeze_lm_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

pub const PRESETS: [&str; 4] = ["desk", "csqa-paper", "obqa-paper", "medqa-paper"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            lm_layers: 2,
            greaselm_layers: 3,
            d_lm: 64,
            d_gnn: 32,
            lm_heads: 2,
            gnn_heads: 2,
            lm_ffn_hidden: 128,
            mlp_hidden: 32,
            mint_hidden: 64,
            dropout: 0.1,
            share_mint: true,
            interaction_schedule: Schedule::EveryLayer,
            connectivity_mode: Connectivity::LinkedOnly,
            node_init_mode: NodeInitMode::LearnedTable,
            directed_bridges: false,
            pool_include_int: false,
            top_k_nodes: 200,
            max_tokens: 100,
            lr_lm: 1e-3,
            lr_other: 1e-3,
            freeze_lm_epochs: 0,
            batch_size: 16,
            epochs: 30,
            grad_clip: 1.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }

    fn paper_common() -> Self {
        Self {
            d_lm: 1024,
            d_gnn: 200,
            lm_heads: 16,
            gnn_heads: 2,
            lm_ffn_hidden: 4096,
            mlp_hidden: 200,
            mint_hidden: 400,
            dropout: 0.2,
            top_k_nodes: 200,
            max_tokens: 100,
            lr_lm: 1e-5,
            lr_other: 1e-3,
            freeze_lm_epochs: 4,
            batch_size: 128,
            grad_clip: 1.0,
            optimizer: OptimizerKind::RAdam,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "desk" => Self::desk(),
            "csqa-paper" => Self {
                lm_layers: 19,
                greaselm_layers: 5,
                epochs: 30,
                ..Self::paper_common()
            },
            "obqa-paper" => Self {
                lm_layers: 18,
                greaselm_layers: 6,
                mint_hidden: 200,
                epochs: 70,
                ..Self::paper_common()
            },
            "medqa-paper" => Self {
                lm_layers: 9,
                greaselm_layers: 3,
                lr_lm: 5e-5,
                freeze_lm_epochs: 0,
                epochs: 20,
                max_tokens: 512,
                ..Self::paper_common()
            },
            _ => return Err(Error::Config(format!("unknown preset `{name}`"))),
        })
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            top_k: self.top_k_nodes,
            connectivity: self.connectivity_mode,
            directed_bridges: self.directed_bridges,
        }
    }

    /// Sets one field from its textual form. `N` and `M` alias the layer counts.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("bad value `{v}` for `{key}`"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        let float = || v.parse::<f64>().map_err(|_| bad());
        let boolean = || match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "lm_layers" | "N" => self.lm_layers = int()?,
            "greaselm_layers" | "M" => self.greaselm_layers = int()?,
            "d_lm" => self.d_lm = int()?,
            "d_gnn" => self.d_gnn = int()?,
            "lm_heads" => self.lm_heads = int()?,
            "gnn_heads" => self.gnn_heads = int()?,
            "lm_ffn_hidden" => self.lm_ffn_hidden = int()?,
            "mlp_hidden" => self.mlp_hidden = int()?,
            "mint_hidden" => self.mint_hidden = int()?,
            "dropout" => self.dropout = float()?,
            "share_mint" => self.share_mint = boolean()?,
            "interaction_schedule" => self.interaction_schedule = v.parse()?,
            "connectivity_mode" => self.connectivity_mode = v.parse()?,
            "node_init_mode" => self.node_init_mode = v.parse()?,
            "directed_bridges" => self.directed_bridges = boolean()?,
            "pool_include_int" => self.pool_include_int = boolean()?,
            "top_k_nodes" => self.top_k_nodes = int()?,
            "max_tokens" => self.max_tokens = int()?,
            "lr_lm" => self.lr_lm = float()?,
            "lr_other" => self.lr_other = float()?,
            "freeze_lm_epochs" => self.freeze_lm_epochs = int()?,
            "batch_size" => self.batch_size = int()?,
            "epochs" => self.epochs = int()?,
            "grad_clip" => self.grad_clip = float()?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "radam" => OptimizerKind::RAdam,
                    _ => return Err(bad()),
                }
            }
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Fields in canonical order as `(key, value)` text.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lm_layers", self.lm_layers.to_string()),
            ("greaselm_layers", self.greaselm_layers.to_string()),
            ("d_lm", self.d_lm.to_string()),
            ("d_gnn", self.d_gnn.to_string()),
            ("lm_heads", self.lm_heads.to_string()),
            ("gnn_heads", self.gnn_heads.to_string()),
            ("lm_ffn_hidden", self.lm_ffn_hidden.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("mint_hidden", self.mint_hidden.to_string()),
            ("dropout", self.dropout.to_string()),
            ("share_mint", self.share_mint.to_string()),
            ("interaction_schedule", self.interaction_schedule.to_string()),
            ("connectivity_mode", self.connectivity_mode.to_string()),
            ("node_init_mode", self.node_init_mode.to_string()),
            ("directed_bridges", self.directed_bridges.to_string()),
            ("pool_include_int", self.pool_include_int.to_string()),
            ("top_k_nodes", self.top_k_nodes.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("lr_lm", self.lr_lm.to_string()),
            ("lr_other", self.lr_other.to_string()),
            ("freeze_lm_epochs", self.freeze_lm_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            (
                "optimizer",
                match self.optimizer {
                    OptimizerKind::Adam => "adam",
                    OptimizerKind::RAdam => "radam",
                }
                .to_string(),
            ),
            ("seed", self.seed.to_string()),
        ]
    }

    /// One line, space separated `key=value` pairs.
    pub fn to_line(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines (`#` starts a comment). A `preset` line
    /// selects the starting point wherever it appears; otherwise `desk`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let pairs = parse_pairs(text, origin)?;
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => Self::preset(v)?,
            None => Self::desk(),
        };
        let mut seen = std::collections::HashMap::new();
        for (line, k, v) in &pairs {
            if k == "preset" {
                continue;
            }
            let canon = canonical_key(k);
            if let Some(prev) = seen.insert(canon, v.clone()) {
                if &prev != v {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: *line,
                        msg: format!("conflicting values for `{k}`"),
                    });
                }
            }
            cfg.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: *line,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("greaselm_layers", self.greaselm_layers),
            ("d_lm", self.d_lm),
            ("d_gnn", self.d_gnn),
            ("lm_heads", self.lm_heads),
            ("gnn_heads", self.gnn_heads),
            ("lm_ffn_hidden", self.lm_ffn_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("mint_hidden", self.mint_hidden),
            ("top_k_nodes", self.top_k_nodes),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !self.d_lm.is_multiple_of(self.lm_heads) {
            return Err(Error::Config("lm_heads must divide d_lm".into()));
        }
        if !self.d_gnn.is_multiple_of(self.gnn_heads) {
            return Err(Error::Config("gnn_heads must divide d_gnn".into()));
        }
        if self.max_tokens < 8 {
            return Err(Error::Config("max_tokens must be at least 8".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.lr_lm >= 0.0 && self.lr_other >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("learning rates must be >= 0 and grad_clip > 0".into()));
        }
        Ok(())
    }
}

/// Canonical field name for a key or its alias.
pub fn canonical_key(k: &str) -> String {
    match k {
        "N" => "lm_layers".into(),
        "M" => "greaselm_layers".into(),
        other => other.to_string(),
    }
}

/// `(line, key, value)` triples of a `key = value` text.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_presets_follow_the_hyperparameter_table() {
        let c = RunConfig::preset("csqa-paper").unwrap();
        assert_eq!((c.greaselm_layers, c.lm_layers), (5, 19));
        assert_eq!((c.d_gnn, c.mlp_hidden, c.mint_hidden, c.gnn_heads), (200, 200, 400, 2));
        assert_eq!((c.lr_lm, c.lr_other, c.freeze_lm_epochs), (1e-5, 1e-3, 4));
        assert_eq!((c.batch_size, c.epochs, c.grad_clip), (128, 30, 1.0));
        assert_eq!((c.top_k_nodes, c.max_tokens, c.dropout), (200, 100, 0.2));
        assert_eq!(c.optimizer, OptimizerKind::RAdam);
        let o = RunConfig::preset("obqa-paper").unwrap();
        assert_eq!(
            (o.greaselm_layers, o.lm_layers, o.mint_hidden, o.epochs),
            (6, 18, 200, 70)
        );
        let m = RunConfig::preset("medqa-paper").unwrap();
        assert_eq!(
            (m.greaselm_layers, m.lm_layers, m.lr_lm, m.freeze_lm_epochs),
            (3, 9, 5e-5, 0)
        );
        assert_eq!((m.epochs, m.max_tokens), (20, 512));
    }

    #[test]
    fn desk_defaults() {
        let d = RunConfig::desk();
        assert_eq!(
            (d.d_lm, d.lm_layers, d.d_gnn, d.greaselm_layers, d.lm_heads),
            (64, 2, 32, 3, 2)
        );
        assert_eq!(d.top_k_nodes, 200);
        assert_eq!(d.max_tokens, 100);
    }

    #[test]
    fn parse_with_preset_aliases_and_comments() {
        let c = RunConfig::parse("# tiny\nM = 4\npreset = csqa-paper\nseed=7 # trailing\n", "t").unwrap();
        assert_eq!(c.greaselm_layers, 4);
        assert_eq!(c.lm_layers, 19);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = RunConfig::parse("d_lm = 8\nbogus = 1\n", "f.cfg").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::parse("M = 2\ngreaselm_layers = 3\n", "f").is_err());
        assert!(RunConfig::parse("d_lm = 10\nlm_heads = 3\n", "f").is_err());
        assert!(RunConfig::parse("interaction_schedule = weekly\n", "f").is_err());
    }

    #[test]
    fn file_string_round_trips() {
        let mut c = RunConfig::preset("obqa-paper").unwrap();
        c.interaction_schedule = Schedule::None;
        c.seed = 99;
        assert_eq!(RunConfig::parse(&c.to_file_string(), "x").unwrap(), c);
        assert!(c.to_line().contains("interaction_schedule=none"));
    }
}
