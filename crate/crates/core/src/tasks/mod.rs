//! Datasets, batching and evaluation.

pub mod features;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Tensor, Var};
use crate::prompt::{forward_graph, PromptSpec};
use crate::transformer::{GradMode, Graph, Model};

pub use features::{load_examples, load_features, write_examples};
pub use synthetic::{gen_synthetic, SyntheticTaskSpec, CLS_TOKEN, SYMBOL_BASE};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// `[N x d_v]`, row 0 the global visual token.
    pub features: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Prototype keys of a synthetic task, one per row.
    pub prototypes: Option<Tensor>,
    /// Class codes of a synthetic task, one per row.
    pub class_codes: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy over classes.
    #[default]
    Softmax,
    /// Per-class sigmoid cross-entropy against one-hot targets.
    Binary,
}

/// Builds the loss node for a batch of logits.
pub fn loss_node(g: &mut Graph, logits: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Softmax => g.tape.cross_entropy(logits, labels),
        LossKind::Binary => {
            let classes = g.tape.value(logits).cols();
            let mut t = Tensor::zeros(&[labels.len(), classes]);
            for (i, &y) in labels.iter().enumerate() {
                if y >= classes {
                    return Err(invalid(format!("label {y} outside {classes} classes")));
                }
                t.data_mut()[i * classes + y] = 1.0;
            }
            g.tape.bce_with_logits(logits, &t)
        }
    }
}

/// Count of rows whose arg-max logit equals the label (first max wins).
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

/// Forward pass on one batch: `(mean loss, correct count)`.
pub fn score_batch(model: &Model, prompt: &PromptSpec, batch: &[Example], loss: LossKind) -> Result<(f64, usize)> {
    let tokens: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let feats: Vec<&Tensor> = batch.iter().map(|e| &e.features).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut g = model.graph(GradMode::None);
    let out = forward_graph(model, &mut g, prompt, &tokens, &feats)?;
    let l = loss_node(&mut g, out.logits, &labels, loss)?;
    Ok((g.tape.value(l).data()[0], count_correct(g.tape.value(out.logits), &labels)))
}

/// Mean top-1 accuracy and mean loss over `examples`, in order, in batches
/// of `batch_size`.
pub fn evaluate(
    model: &Model,
    prompt: &PromptSpec,
    examples: &[Example],
    batch_size: usize,
    loss: LossKind,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(invalid("evaluate: empty split"));
    }
    if batch_size == 0 {
        return Err(invalid("evaluate: batch size must be positive"));
    }
    let (mut loss_sum, mut correct) = (0.0, 0);
    for chunk in examples.chunks(batch_size) {
        let (l, c) = score_batch(model, prompt, chunk, loss)?;
        loss_sum += l * chunk.len() as f64;
        correct += c;
    }
    let n = examples.len();
    Ok(Metrics { accuracy: correct as f64 / n as f64, loss: loss_sum / n as f64, count: n })
}
