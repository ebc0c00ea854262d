//! Mini-batch training with a deterministic shuffle and fixed-order
//! gradient reduction.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::accuracy;
use super::optim::{clip_grad_norm, Optimizer};
use super::{build_vocab, graph_dims, GreaseLm, ModelDims, PreparedExample, RunConfig};
use crate::data::QAExample;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::numerics::dropout::mix;
use crate::numerics::{Grads, Graph, ParamGroup, ParamStore};
use crate::retrieval::Linker;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: Option<f64>,
    pub seconds: f64,
}

/// Loss and dense gradient of one example.
pub fn example_grad(
    model: &GreaseLm,
    params: &ParamStore<f32>,
    ex: &PreparedExample,
    step: u64,
) -> Result<(f64, Grads<f32>)> {
    let mut g = Graph::new(params);
    let loss = model.loss(&mut g, ex, step, true)?;
    let l = g.value(loss).item() as f64;
    Ok((l, g.backward(loss)?))
}

/// Shuffled example order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    order
}

pub struct Trainer<'a> {
    pub model: &'a GreaseLm,
    pub optimizer: Optimizer,
    pub step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a GreaseLm, params: &ParamStore<f32>) -> Self {
        let c = &model.cfg;
        Self {
            model,
            optimizer: Optimizer::new(c.optimizer, params, c.lr_lm, c.lr_other),
            step: 0,
        }
    }

    /// Which parameters update during `epoch` (0-based).
    pub fn active(&self, params: &ParamStore<f32>, epoch: usize) -> Vec<bool> {
        let frozen = epoch < self.model.cfg.freeze_lm_epochs;
        params
            .iter()
            .map(|(_, p)| !(frozen && p.group == ParamGroup::Lm))
            .collect()
    }

    /// One optimizer step on `batch`; returns the summed example loss.
    pub fn train_batch(
        &mut self,
        params: &mut ParamStore<f32>,
        batch: &[&PreparedExample],
        epoch: usize,
        batch_index: usize,
    ) -> Result<f64> {
        let step = self.step;
        let model = self.model;
        let shared: &ParamStore<f32> = params;
        let results: Vec<Result<(f64, Grads<f32>)>> = batch
            .par_iter()
            .map(|ex| example_grad(model, shared, ex, step))
            .collect();
        let mut total = Grads::zeros_like(params);
        let mut loss_sum = 0.0;
        for r in results {
            let (l, g) = r?;
            loss_sum += l;
            total.add(&g);
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
                examples: batch.iter().map(|e| e.id.clone()).collect(),
            });
        }
        total.scale(1.0 / batch.len() as f32);
        let active = self.active(params, epoch);
        clip_grad_norm(&mut total, &active, model.cfg.grad_clip);
        self.optimizer.step(params, &total, &active);
        self.step += 1;
        Ok(loss_sum)
    }

    pub fn train_epoch(&mut self, params: &mut ParamStore<f32>, data: &[PreparedExample], epoch: usize) -> Result<f64> {
        let order = epoch_order(self.model.cfg.seed, epoch, data.len());
        let mut loss = 0.0;
        for (bi, chunk) in order.chunks(self.model.cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &data[i]).collect();
            loss += self.train_batch(params, &batch, epoch, bi)?;
        }
        Ok(loss / data.len() as f64)
    }
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &GreaseLm,
    params: &mut ParamStore<f32>,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
    mut on_epoch: impl FnMut(&EpochMetrics, &ParamStore<f32>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut trainer = Trainer::new(model, params);
    let mut log = Vec::with_capacity(model.cfg.epochs);
    for epoch in 0..model.cfg.epochs {
        let start = Instant::now();
        let train_loss = trainer.train_epoch(params, train_set, epoch)?;
        let dev_acc = if dev_set.is_empty() {
            None
        } else {
            Some(accuracy(model, params, dev_set)?)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            dev_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m, params)?;
        log.push(m);
    }
    Ok(log)
}

/// Fresh model for `cfg`, vocabulary over both sets, trained on `train_set`;
/// returns dev accuracy.
pub fn fit_and_score(
    cfg: &RunConfig,
    train_set: &[QAExample],
    dev_set: &[QAExample],
    global: Option<&(KnowledgeGraph, Linker)>,
) -> Result<f64> {
    let all: Vec<QAExample> = train_set.iter().chain(dev_set).cloned().collect();
    let vocab = build_vocab(&all);
    let (kg_nodes, kg_relations) = graph_dims(&all, global.map(|g| &g.0));
    let dims = ModelDims {
        vocab_size: vocab.len(),
        kg_nodes,
        kg_relations,
    };
    let (model, mut params) = GreaseLm::build(cfg, dims)?;
    let tr = model.prepare_all(train_set, &vocab, global)?;
    let dv = model.prepare_all(dev_set, &vocab, global)?;
    train(&model, &mut params, &tr, &[], |_, _| Ok(()))?;
    accuracy(&model, &params, &dv)
}
