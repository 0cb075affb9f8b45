//! Training loops: fixed-placement training, placement sweeps and the live
//! reward oracle for placement search.

mod optim;
mod search;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::attach_adapters;
use crate::error::{invalid, Result};
use crate::numerics::{seeded_rng, Tensor};
use crate::prompt::{forward_graph, generator_prefix, install_generator, PromptSpec, Strategy};
use crate::tasks::{count_correct, evaluate, loss_node, Example, LossKind, TaskDataset};
use crate::transformer::{estimate_flops, Model, ModelSpec};

pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use search::{run_live_search, FinalPhase, LiveOracle, LiveSearchReport};

/// Independent sub-seed for one purpose of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_SEARCH: u64 = 3;
const STREAM_VAL: u64 = 4;
const STREAM_ADAPTER: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    /// Linear warmup length in epochs; may be fractional.
    pub warmup_epochs: f64,
    pub loss: LossKind,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            eval_batch: 128,
            warmup_epochs: 1.0,
            loss: LossKind::Softmax,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(invalid("epochs and batch sizes must be positive"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return Err(invalid("warmup_epochs must be finite and non-negative"));
        }
        self.optim.validate()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn warmup_steps(&self, train_len: usize) -> usize {
        (self.warmup_epochs * self.steps_per_epoch(train_len) as f64).round() as usize
    }
}

/// Fresh model with a generator in every slot `1..=M`, so any insertion
/// layer starts from the same weights for a given seed.
pub fn build_model(spec: &ModelSpec, adapter_width: Option<usize>, seed: u64) -> Result<Model> {
    let mut rng = seeded_rng(derive_seed(seed, STREAM_INIT));
    let mut model = Model::new(spec.clone(), &mut rng)?;
    for slot in 1..=spec.layers {
        install_generator(&mut model, slot, &mut rng)?;
    }
    match adapter_width {
        Some(d_h) => attach_adapters(model, d_h, &mut seeded_rng(derive_seed(seed, STREAM_ADAPTER))),
        None => Ok(model),
    }
}

/// Removes generators that `prompt` does not use.
pub fn keep_used_generators(model: &mut Model, prompt: &PromptSpec) {
    let keep = prompt.strategy.is_dynamic().then(|| format!("{}.", generator_prefix(prompt.layer)));
    model
        .params
        .retain(|name| !name.starts_with("prompt.gen") || keep.as_deref().is_some_and(|k| name.starts_with(k)));
}

/// One optimizer step on `batch`: `(mean loss, correct count)`.
pub fn train_step(
    model: &mut Model,
    prompt: &PromptSpec,
    batch: &[Example],
    loss: LossKind,
    opt: &mut Optimizer,
) -> Result<(f64, usize)> {
    let tokens: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let feats: Vec<&Tensor> = batch.iter().map(|e| &e.features).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let (value, correct, grads) = {
        let mut g = model.graph(model.train_mode());
        let out = forward_graph(model, &mut g, prompt, &tokens, &feats)?;
        let l = loss_node(&mut g, out.logits, &labels, loss)?;
        let value = g.tape.value(l).data()[0];
        let correct = count_correct(g.tape.value(out.logits), &labels);
        (value, correct, g.param_grads(l)?)
    };
    opt.step(&mut model.params, &grads)?;
    Ok((value, correct))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Trains `model` with a fixed placement. Train metrics are running means
/// over the epoch's batches; validation runs after each epoch.
pub fn train_model(
    model: &mut Model,
    prompt: &PromptSpec,
    data: &TaskDataset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    prompt.validate(&model.spec)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(invalid("training needs non-empty train and validation splits"));
    }
    let mut opt = Optimizer::new(cfg.optim.clone(), cfg.warmup_steps(data.train.len()))?;
    let mut rng = seeded_rng(derive_seed(seed, STREAM_ORDER));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data.train[i].clone()));
            let (l, c) = train_step(model, prompt, &batch, cfg.loss, &mut opt)?;
            loss_sum += l * batch.len() as f64;
            correct += c;
        }
        let val = evaluate(model, prompt, &data.val, cfg.eval_batch, cfg.loss)?;
        let n = data.train.len() as f64;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub layer: usize,
    pub final_val_acc: f64,
    pub total_macs: u64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub strategy: Strategy,
    pub rows: Vec<SweepRow>,
    /// Layer with the best final validation accuracy; ties go deeper.
    pub best_layer: usize,
}

impl SweepReport {
    pub fn row(&self, layer: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

/// Independent fixed-placement runs from identical initial weights, one per
/// layer. Runs execute on the current rayon pool; results do not depend on
/// its size.
pub fn run_sweep(
    spec: &ModelSpec,
    strategy: Strategy,
    layers: &[usize],
    data: &TaskDataset,
    cfg: &TrainConfig,
    adapter_width: Option<usize>,
    seed: u64,
) -> Result<SweepReport> {
    if layers.is_empty() {
        return Err(invalid("sweep needs at least one layer"));
    }
    let n_visual = data.train.first().ok_or_else(|| invalid("empty training split"))?.features.rows();
    let rows = layers
        .par_iter()
        .map(|&layer| {
            let prompt = PromptSpec::new(strategy, layer);
            prompt.validate(spec)?;
            let mut model = build_model(spec, adapter_width, seed)?;
            keep_used_generators(&mut model, &prompt);
            let history = train_model(&mut model, &prompt, data, cfg, seed, |_| {})?;
            let final_val_acc = history.last().map_or(0.0, |m| m.val_acc);
            let total_macs = estimate_flops(spec, &prompt, n_visual)?.total_macs;
            Ok(SweepRow { layer, final_val_acc, total_macs, history })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = rows;
    rows.sort_by_key(|r| r.layer);
    let accs: Vec<f64> = rows.iter().map(|r| r.final_val_acc).collect();
    let best_layer = rows[crate::bandit::argmax_prefer_last(&accs)].layer;
    Ok(SweepReport { strategy, rows, best_layer })
}
