//! Cross-modal layer: an LM block and a GNN layer side by side, with the
//! interaction token and interaction node mixed by a 2-layer MLP.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gnn::{GnnLayer, GnnTables, Messages};
use crate::numerics::nn::{Builder, Mlp2};
use crate::numerics::{DropoutCtx, Graph, ParamGroup, Real, Var};
use crate::retrieval::Subgraph;
use crate::text::LmLayer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    EveryLayer,
    EveryOtherLayer,
    None,
}

impl Schedule {
    /// Whether cross-modal layer `l` (1-based) mixes. Every other layer
    /// means layers 1, 3, 5, …
    pub fn fuses(self, l: usize) -> bool {
        match self {
            Schedule::EveryLayer => true,
            Schedule::EveryOtherLayer => l % 2 == 1,
            Schedule::None => false,
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "every_layer" => Ok(Self::EveryLayer),
            "every_other_layer" => Ok(Self::EveryOtherLayer),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown interaction schedule `{s}`"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EveryLayer => "every_layer",
            Self::EveryOtherLayer => "every_other_layer",
            Self::None => "none",
        })
    }
}

/// `[h_int; e_int] = MLP([h̃_int; ẽ_int])`, split back at `d_lm`.
#[derive(Clone, Debug)]
pub struct Mint {
    pub mlp: Mlp2,
    pub d_lm: usize,
    pub d_gnn: usize,
}

impl Mint {
    pub fn new(b: &mut Builder, name: &str, d_lm: usize, d_gnn: usize, hidden: usize) -> Result<Self> {
        let d = d_lm + d_gnn;
        Ok(Self {
            mlp: Mlp2::new(b, name, d, hidden, d, ParamGroup::Other)?,
            d_lm,
            d_gnn,
        })
    }

    /// Both inputs are single rows.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, h_int: Var, e_int: Var, drop: &DropoutCtx) -> Result<(Var, Var)> {
        if g.shape(h_int) != [1, self.d_lm] || g.shape(e_int) != [1, self.d_gnn] {
            return Err(Error::shape("mint", g.shape(h_int), g.shape(e_int)));
        }
        let x = g.concat_cols(&[h_int, e_int])?;
        let y = self.mlp.forward(g, x, drop)?;
        Ok((g.slice_cols(y, 0, self.d_lm)?, g.slice_cols(y, self.d_lm, self.d_gnn)?))
    }
}

#[derive(Clone, Debug)]
pub struct GreaseLmLayer {
    pub lm: LmLayer,
    pub gnn: GnnLayer,
    pub mint: Mint,
}

pub struct FusedOut {
    pub h: Var,
    pub e: Var,
    /// Pre-mix outputs of the two sublayers.
    pub h_pre: Var,
    pub e_pre: Var,
    pub alpha: Var,
}

impl GreaseLmLayer {
    /// Runs both sublayers; when `fuse` is set the two interaction slots are
    /// replaced by the MInt output and every other row passes through.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        h: Var,
        e: Var,
        types: Var,
        tables: &GnnTables,
        msgs: &Messages,
        pad_mask: &[bool],
        drop: &DropoutCtx,
        fuse: bool,
    ) -> Result<FusedOut> {
        if g.shape(e)[0] != msgs.n_nodes {
            return Err(Error::shape("greaselm_layer", g.shape(e), &[msgs.n_nodes]));
        }
        let h_pre = self.lm.forward(g, h, pad_mask, drop)?;
        let out = self.gnn.forward(g, e, types, tables, msgs, drop)?;
        let e_pre = out.e;
        let (h, e) = if fuse {
            let hi = g.row(h_pre, 0)?;
            let ei = g.row(e_pre, Subgraph::INTERACTION)?;
            let (hi, ei) = self.mint.forward(g, hi, ei, drop)?;
            (g.set_row(h_pre, 0, hi)?, g.set_row(e_pre, Subgraph::INTERACTION, ei)?)
        } else {
            (h_pre, e_pre)
        };
        Ok(FusedOut {
            h,
            e,
            h_pre,
            e_pre,
            alpha: out.alpha,
        })
    }
}
