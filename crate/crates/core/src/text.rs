//! Tokenizer, vocabulary, input layout and the transformer encoder block.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::nn::{dropout, Builder, LayerNorm, Linear, Mlp2};
use crate::numerics::{DropoutCtx, Graph, ParamGroup, ParamId, Real, Var};

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const UNK: u32 = 2;
pub const INT: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[SEP]", "[UNK]", "[INT]"];

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials followed by `tokens` in the given order; duplicates are dropped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIALS.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len() as u32);
                v.tokens.push(t);
            }
        }
        v
    }

    /// Every token appearing in `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(set)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One non-special token per line; line `i` (from 0) is id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) || SPECIALS.contains(&line) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("bad vocabulary token `{line}`"),
                });
            }
            if !seen.insert(line) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("duplicate token `{line}`"),
                });
            }
            tokens.push(line.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub positions: Vec<u32>,
    /// `true` marks padding.
    pub pad_mask: Vec<bool>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Appends PAD positions up to `len`.
    pub fn padded(&self, len: usize) -> Self {
        let mut e = self.clone();
        for t in self.len()..len {
            e.token_ids.push(PAD);
            e.segment_ids.push(0);
            e.positions.push(t as u32);
            e.pad_mask.push(true);
        }
        e
    }
}

/// Layout `[INT, c…, SEP, q…, SEP, a…, SEP]`. Context tokens are dropped from
/// the end until the sequence fits in `max_tokens`.
pub fn encode_input(c: &str, q: &str, a: &str, vocab: &Vocabulary, max_tokens: usize) -> Result<EncodedExample> {
    if max_tokens < 8 {
        return Err(Error::InvalidArgument(format!("max_tokens {max_tokens} < 8")));
    }
    let (ct, qt, at) = (tokenize(c), tokenize(q), tokenize(a));
    if qt.is_empty() {
        return Err(Error::InvalidArgument("empty question".into()));
    }
    if at.is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    let fixed = 4 + qt.len() + at.len();
    if fixed > max_tokens {
        return Err(Error::InvalidArgument(format!(
            "question and answer need {fixed} tokens, limit is {max_tokens}"
        )));
    }
    let keep_c = ct.len().min(max_tokens - fixed);
    let ids = |ts: &[String]| ts.iter().map(|t| vocab.id(t)).collect::<Vec<_>>();

    let mut token_ids = vec![INT];
    token_ids.extend(ids(&ct[..keep_c]));
    token_ids.push(SEP);
    token_ids.extend(ids(&qt));
    token_ids.push(SEP);
    let seg1_start = token_ids.len();
    token_ids.extend(ids(&at));
    token_ids.push(SEP);

    let n = token_ids.len();
    Ok(EncodedExample {
        segment_ids: (0..n).map(|i| u32::from(i >= seg1_start)).collect(),
        positions: (0..n as u32).collect(),
        pad_mask: vec![false; n],
        token_ids,
    })
}

/// Token, segment and position tables.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub tok: ParamId,
    pub seg: ParamId,
    pub pos: ParamId,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Embeddings {
    pub fn new(b: &mut Builder, vocab_size: usize, max_positions: usize, d: usize) -> Result<Self> {
        Ok(Self {
            tok: b.uniform("lm.embed.token", &[vocab_size, d], 0.1, ParamGroup::Lm)?,
            seg: b.uniform("lm.embed.segment", &[2, d], 0.1, ParamGroup::Lm)?,
            pos: b.uniform("lm.embed.position", &[max_positions, d], 0.1, ParamGroup::Lm)?,
            vocab_size,
            max_positions,
        })
    }

    /// `h[t] = tok[id_t] + seg[s_t] + pos[t]`, then embedding dropout.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: &EncodedExample, drop: &DropoutCtx) -> Result<Var> {
        if let Some(&bad) = x.token_ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if let Some(&bad) = x.positions.iter().find(|&&p| p as usize >= self.max_positions) {
            return Err(Error::InvalidArgument(format!(
                "position {bad} outside table of {}",
                self.max_positions
            )));
        }
        if let Some(&bad) = x.segment_ids.iter().find(|&&s| s > 1) {
            return Err(Error::InvalidArgument(format!("segment id {bad}")));
        }
        let idx = |v: &[u32]| v.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let (tok, seg, pos) = (g.param(self.tok), g.param(self.seg), g.param(self.pos));
        let a = g.gather_rows(tok, &idx(&x.token_ids))?;
        let b = g.gather_rows(seg, &idx(&x.segment_ids))?;
        let c = g.gather_rows(pos, &idx(&x.positions))?;
        let h = g.add(a, b)?;
        let h = g.add(h, c)?;
        dropout(g, h, drop, "lm.embed")
    }
}

/// Multi-head self-attention; padded key positions are masked out.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub path: String,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, group: ParamGroup) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), d, d, group)?,
            k: Linear::new(b, &format!("{name}.k"), d, d, group)?,
            v: Linear::new(b, &format!("{name}.v"), d, d, group)?,
            o: Linear::new(b, &format!("{name}.o"), d, d, group)?,
            heads,
            path: name.to_string(),
        })
    }

    /// Returns the output and the per-head attention matrices.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        h: Var,
        pad_mask: &[bool],
        drop: &DropoutCtx,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.q.d_in;
        let dh = d / self.heads;
        let keep: Vec<bool> = pad_mask.iter().map(|&p| !p).collect();
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let s = g.mask_cols(s, &keep)?;
            let p = g.softmax_rows(s);
            let p = dropout(g, p, drop, &format!("{}.h{head}.attn", self.path))?;
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = g.concat_cols(&outs)?;
        Ok((self.o.forward(g, cat)?, probs))
    }
}

/// Post-norm transformer encoder block:
/// `x = LN(h + Attn(h))`, `out = LN(x + FFN(x))`.
#[derive(Clone, Debug)]
pub struct LmLayer {
    pub attn: SelfAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp2,
    pub ln2: LayerNorm,
    pub path: String,
}

impl LmLayer {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        let group = ParamGroup::Lm;
        Ok(Self {
            attn: SelfAttention::new(b, &format!("{name}.attn"), d, heads, group)?,
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d, group)?,
            ffn: Mlp2::new(b, &format!("{name}.ffn"), d, ffn_hidden, d, group)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d, group)?,
            path: name.to_string(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, h: Var, pad_mask: &[bool], drop: &DropoutCtx) -> Result<Var> {
        Ok(self.forward_with_attention(g, h, pad_mask, drop)?.0)
    }

    pub fn forward_with_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        h: Var,
        pad_mask: &[bool],
        drop: &DropoutCtx,
    ) -> Result<(Var, Vec<Var>)> {
        let rows = g.shape(h)[0];
        if pad_mask.len() != rows {
            return Err(Error::shape("lm_layer", g.shape(h), &[pad_mask.len()]));
        }
        let (a, probs) = self.attn.forward(g, h, pad_mask, drop)?;
        let a = dropout(g, a, drop, &format!("{}.attn_out", self.path))?;
        let x = g.add(h, a)?;
        let x = self.ln1.forward(g, x)?;
        let f = self.ffn.forward(g, x, drop)?;
        let f = dropout(g, f, drop, &format!("{}.ffn_out", self.path))?;
        let y = g.add(x, f)?;
        Ok((self.ln2.forward(g, y)?, probs))
    }
}
