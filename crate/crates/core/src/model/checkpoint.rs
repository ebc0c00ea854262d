//! Model directory: tensor checkpoint plus `vocab.txt` and `model.cfg`.

use std::fs;
use std::path::Path;

use super::config::{parse_pairs, RunConfig};
use super::{GreaseLm, ModelDims};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, write_atomic};
use crate::numerics::ParamStore;
use crate::text::Vocabulary;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "model.cfg";

pub fn save_model(dir: &Path, model: &GreaseLm, params: &ParamStore<f32>, vocab: &Vocabulary) -> Result<()> {
    checkpoint::save(params, dir)?;
    let tmp = dir.join("vocab.tmp.txt");
    vocab.save(&tmp)?;
    fs::rename(&tmp, dir.join(VOCAB_FILE)).map_err(|e| Error::io(dir, e))?;
    let mut cfg = model.cfg.to_file_string();
    cfg.push_str(&format!(
        "vocab_size = {}\nkg_nodes = {}\nkg_relations = {}\n",
        model.dims.vocab_size, model.dims.kg_nodes, model.dims.kg_relations
    ));
    write_atomic(&dir.join(CONFIG_FILE), cfg.as_bytes())
}

/// Splits a `model.cfg` into the run configuration and the data dimensions.
pub fn parse_model_cfg(text: &str, origin: &str) -> Result<(RunConfig, ModelDims)> {
    let mut dims = [None; 3];
    let mut rest = String::new();
    for (line, k, v) in parse_pairs(text, origin)? {
        let slot = match k.as_str() {
            "vocab_size" => Some(0),
            "kg_nodes" => Some(1),
            "kg_relations" => Some(2),
            _ => None,
        };
        match slot {
            Some(i) => {
                dims[i] = Some(v.parse::<usize>().map_err(|_| Error::Parse {
                    path: origin.to_string(),
                    line,
                    msg: format!("bad value for `{k}`"),
                })?)
            }
            None => rest.push_str(&format!("{k} = {v}\n")),
        }
    }
    let [Some(vocab_size), Some(kg_nodes), Some(kg_relations)] = dims else {
        return Err(Error::Config(format!("{origin}: missing model dimensions")));
    };
    Ok((
        RunConfig::parse(&rest, origin)?,
        ModelDims {
            vocab_size,
            kg_nodes,
            kg_relations,
        },
    ))
}

/// Rebuilds the model from `dir` and loads its weights.
pub fn load_model(dir: &Path) -> Result<(GreaseLm, ParamStore<f32>, Vocabulary)> {
    let cpath = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let (cfg, dims) = parse_model_cfg(&text, &cpath.display().to_string())?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != dims.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, model.cfg says {}",
            vocab.len(),
            dims.vocab_size
        )));
    }
    let (model, mut params) = GreaseLm::build(&cfg, dims)?;
    checkpoint::load_into(&mut params, dir)?;
    Ok((model, params, vocab))
}
