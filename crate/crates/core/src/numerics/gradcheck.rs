use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// One scalar coordinate of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct CoordError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordError> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Samples `n` coordinates: a parameter is picked uniformly among those
/// accepted by `filter`, then a uniform index within it.
pub fn sample_coords(params: &ParamStore<f64>, n: usize, seed: u64, filter: impl Fn(&str) -> bool) -> Vec<Coord> {
    let eligible: Vec<ParamId> = params
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .map(|(id, _)| id)
        .collect();
    if eligible.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let param = eligible[rng.gen_range(0..eligible.len())];
            let index = rng.gen_range(0..params.tensor(param).numel());
            Coord { param, index }
        })
        .collect()
}

/// Compares reverse-mode gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` at the given coordinates.
///
/// `model_fn` must build the scalar loss on the supplied graph and must be
/// deterministic; dropout has to be off.
pub fn grad_check<F>(model_fn: F, params: &ParamStore<f64>, coords: &[Coord], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = model_fn(&mut g)?;
        Ok(g.value(loss).item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic = {
        let mut g = Graph::new(params);
        let loss = model_fn(&mut g)?;
        g.backward(loss)?
    };

    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for c in coords {
        let orig = work.tensor(c.param).data()[c.index];
        work.get_mut(c.param).tensor.data_mut()[c.index] = orig + epsilon;
        let plus = eval(&work)?;
        work.get_mut(c.param).tensor.data_mut()[c.index] = orig - epsilon;
        let minus = eval(&work)?;
        work.get_mut(c.param).tensor.data_mut()[c.index] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get(c.param).data()[c.index];
        out.push(CoordError {
            name: params.get(c.param).name.clone(),
            index: c.index,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric),
        });
    }
    let max_rel_error = out.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        coords: out,
    })
}
