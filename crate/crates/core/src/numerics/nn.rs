//! Parameterized building blocks shared by every layer.

use super::dropout::DropoutCtx;
use super::graph::{Graph, Var};
use super::params::{Initializer, ParamGroup, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Registers parameters with deterministic, name-keyed initial values.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub init: Initializer,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            init: Initializer::new(seed),
        }
    }

    /// Returns the existing parameter when `name` is already registered, so
    /// shared modules alias one set of tensors.
    pub fn tensor(&mut self, name: &str, t: Tensor<f32>, group: ParamGroup) -> Result<ParamId> {
        if let Some(id) = self.store.id(name) {
            return Ok(id);
        }
        self.store.add(name, t, group)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, group: ParamGroup) -> Result<ParamId> {
        let t = self.init.uniform(name, shape, bound);
        self.tensor(name, t, group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape), group)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> Result<ParamId> {
        self.tensor(name, Tensor::filled(shape, 1.0), group)
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize, group: ParamGroup) -> Result<Self> {
        let wname = format!("{name}.weight");
        let w = b.init.xavier(&wname, d_in, d_out);
        Ok(Self {
            weight: b.tensor(&wname, w, group)?,
            bias: b.zeros(&format!("{name}.bias"), &[1, d_out], group)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two-layer MLP: `fc2(gelu(fc1(x)))`, with dropout on the hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub path: String,
}

impl Mlp2 {
    pub fn new(
        b: &mut Builder,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), d_in, d_hidden, group)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), d_hidden, d_out, group)?,
            path: name.to_string(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, drop: &DropoutCtx) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        let h = dropout(g, h, drop, &self.path)?;
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, d: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: b.ones(&format!("{name}.gamma"), &[1, d], group)?,
            beta: b.zeros(&format!("{name}.beta"), &[1, d], group)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Applies the mask for site `path`; the identity when dropout is off.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, ctx: &DropoutCtx, path: &str) -> Result<Var> {
    if !ctx.enabled() {
        return Ok(x);
    }
    let mask = ctx.mask(path, g.value(x).numel());
    g.dropout(x, mask)
}
