//! Placement search against a model being trained.
//!
//! Each step trains the shared backbone, the head and the generator of one
//! uniformly drawn layer on a training batch, then scores the sampled layers
//! by accuracy on one freshly drawn validation batch.

use rand::seq::{index::sample, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_model, derive_seed, keep_used_generators, train_model, train_step, EpochMetrics, Optimizer, TrainConfig};
use super::{STREAM_ORDER, STREAM_SEARCH, STREAM_VAL};
use crate::bandit::{run_search, RewardOracle, SearchConfig, SearchOutcome};
use crate::error::{invalid, Result};
use crate::numerics::{seeded_rng, Rng};
use crate::prompt::{PromptSpec, Strategy};
use crate::tasks::{score_batch, Example, TaskDataset};
use crate::transformer::{Model, ModelSpec};

pub struct LiveOracle<'d> {
    pub model: Model,
    strategy: Strategy,
    data: &'d TaskDataset,
    cfg: TrainConfig,
    val_batch: usize,
    opt: Optimizer,
    order_rng: Rng,
    val_rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'d> LiveOracle<'d> {
    /// `model` must hold a generator for every arm when `strategy` is
    /// dynamic.
    pub fn new(
        model: Model,
        strategy: Strategy,
        data: &'d TaskDataset,
        cfg: &TrainConfig,
        search: &SearchConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if !strategy.is_dynamic() {
            return Err(invalid(format!("{strategy} prompting has a fixed placement and cannot be searched")));
        }
        if search.arms != model.spec.layers {
            return Err(invalid(format!("{} arms for a {}-layer model", search.arms, model.spec.layers)));
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(invalid("search needs non-empty train and validation splits"));
        }
        let mut cfg = cfg.clone();
        cfg.batch_size = search.train_batch;
        let opt = Optimizer::new(cfg.optim.clone(), cfg.warmup_steps(data.train.len()))?;
        Ok(LiveOracle {
            model,
            strategy,
            data,
            val_batch: search.val_batch.min(data.val.len()),
            opt,
            order_rng: seeded_rng(derive_seed(search.seed, STREAM_ORDER)),
            val_rng: seeded_rng(derive_seed(search.seed, STREAM_VAL)),
            order: (0..data.train.len()).collect(),
            cursor: data.train.len(),
            cfg,
        })
    }

    fn next_batch(&mut self) -> Vec<Example> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            out.push(self.data.train[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

impl RewardOracle for LiveOracle<'_> {
    fn train(&mut self, arm: usize, _step: usize) -> Result<()> {
        let batch = self.next_batch();
        let prompt = PromptSpec::new(self.strategy, arm);
        train_step(&mut self.model, &prompt, &batch, self.cfg.loss, &mut self.opt).map(|_| ())
    }

    fn rewards(&mut self, arms: &[usize], _step: usize) -> Result<Vec<f64>> {
        let picks = sample(&mut self.val_rng, self.data.val.len(), self.val_batch);
        let batch: Vec<Example> = picks.iter().map(|i| self.data.val[i].clone()).collect();
        let (model, strategy, loss) = (&self.model, self.strategy, self.cfg.loss);
        arms.par_iter()
            .map(|&arm| {
                let (_, correct) = score_batch(model, &PromptSpec::new(strategy, arm), &batch, loss)?;
                Ok(correct as f64 / batch.len() as f64)
            })
            .collect()
    }
}

/// What happens after the search picks a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalPhase {
    /// Stop after the search.
    #[default]
    None,
    /// Keep the searched weights and train further at the chosen layer.
    Continue,
    /// Train a freshly initialized model at the chosen layer.
    Reinit,
}

pub struct LiveSearchReport {
    pub outcome: SearchOutcome,
    /// Weights after the search (and the final phase, if any).
    pub model: Model,
    pub final_history: Vec<EpochMetrics>,
}

/// Searches the insertion layer for `strategy` from a model built with
/// `seed`, then optionally trains at the chosen layer.
#[allow(clippy::too_many_arguments)]
pub fn run_live_search(
    spec: &ModelSpec,
    strategy: Strategy,
    data: &TaskDataset,
    cfg: &TrainConfig,
    search: &SearchConfig,
    adapter_width: Option<usize>,
    seed: u64,
    final_phase: FinalPhase,
) -> Result<LiveSearchReport> {
    let model = build_model(spec, adapter_width, seed)?;
    let search = SearchConfig { seed: derive_seed(search.seed, STREAM_SEARCH), ..search.clone() };
    let mut oracle = LiveOracle::new(model, strategy, data, cfg, &search)?;
    let outcome = run_search(&mut oracle, &search)?;
    let prompt = PromptSpec::new(strategy, outcome.best_arm);
    let mut model = match final_phase {
        FinalPhase::Reinit => build_model(spec, adapter_width, seed)?,
        FinalPhase::None | FinalPhase::Continue => oracle.model,
    };
    let final_history = match final_phase {
        FinalPhase::None => Vec::new(),
        FinalPhase::Continue | FinalPhase::Reinit => {
            keep_used_generators(&mut model, &prompt);
            train_model(&mut model, &prompt, data, cfg, seed, |_| {})?
        }
    };
    Ok(LiveSearchReport { outcome, model, final_history })
}
