//! Analytic multiply-accumulate counts for one forward pass.
//!
//! Only matrix products are counted. Per layer with sequence length `S`:
//! `4 S d^2` attention projections, `2 f S d^2` feed-forward and `2 S^2 d`
//! for attention scores and mixing. Decoder layers add cross-attention over
//! the `L` encoder rows.

use super::spec::{ModelKind, ModelSpec};
use crate::error::Result;
use crate::prompt::{PromptSpec, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub prompt: PromptSpec,
    /// Sequence length entering each layer of the prompted stack.
    pub seq_lens: Vec<usize>,
    /// Tokens processed by the language model (both stacks, prompts included).
    pub token_count: usize,
    pub projection_macs: u64,
    /// Score and mixing products of every attention sublayer.
    pub attention_macs: u64,
    /// Visual projection plus prompt generation.
    pub prompt_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    /// Total for common prompting on the same model.
    pub baseline_macs: u64,
    /// `total_macs / baseline_macs`.
    pub ratio: f64,
}

impl FlopsReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

struct Parts {
    seq_lens: Vec<usize>,
    token_count: usize,
    projection: u64,
    attention: u64,
    prompt: u64,
    head: u64,
}

impl Parts {
    fn total(&self) -> u64 {
        self.projection + self.attention + self.prompt + self.head
    }
}

/// `(projection, attention)` MACs of one layer.
fn layer_macs(spec: &ModelSpec, s: usize, cross_len: Option<usize>) -> (u64, u64) {
    let (d, f, s) = (spec.width as u64, spec.ffn_mult as u64, s as u64);
    let mut proj = 4 * s * d * d + 2 * f * s * d * d;
    let mut attn = 2 * s * s * d;
    if let Some(c) = cross_len {
        let c = c as u64;
        proj += 2 * s * d * d + 2 * c * d * d;
        attn += 2 * s * c * d;
    }
    (proj, attn)
}

fn parts(spec: &ModelSpec, prompt: &PromptSpec, n_visual: usize) -> Parts {
    let m = spec.layers;
    let l = spec.text_len;
    let q = prompt.prompt_len(spec, n_visual);
    let (d, dv, n) = (spec.width as u64, spec.visual_width as u64, n_visual as u64);
    let base = match spec.kind {
        ModelKind::Encoder => l,
        ModelKind::EncoderDecoder => 1,
    };
    let seq_lens: Vec<usize> = (1..=m).map(|i| if i < prompt.layer { base } else { base + q }).collect();
    let cross = (spec.kind == ModelKind::EncoderDecoder).then_some(l);
    let mut projection = 0;
    let mut attention = 0;
    if spec.kind == ModelKind::EncoderDecoder {
        for _ in 0..m {
            let (p, a) = layer_macs(spec, l, None);
            projection += p;
            attention += a;
        }
    }
    for &s in &seq_lens {
        let (p, a) = layer_macs(spec, s, cross);
        projection += p;
        attention += a;
    }
    let qm = q as u64;
    let prompt_macs = match prompt.strategy {
        Strategy::Common => n * dv * d,
        Strategy::Cls => dv * d,
        Strategy::DvpSingle | Strategy::DvpMulti => n * dv * d + 2 * n * d * d + 2 * qm * d * d + 2 * qm * n * d,
    };
    let token_count = match spec.kind {
        ModelKind::Encoder => l + q,
        ModelKind::EncoderDecoder => l + 1 + q,
    };
    Parts {
        seq_lens,
        token_count,
        projection,
        attention,
        prompt: prompt_macs,
        head: d * spec.num_classes as u64,
    }
}

pub fn estimate_flops(spec: &ModelSpec, prompt: &PromptSpec, n_visual: usize) -> Result<FlopsReport> {
    spec.validate()?;
    prompt.validate(spec)?;
    if n_visual == 0 {
        return Err(crate::error::invalid("estimate_flops: need at least one visual token"));
    }
    let p = parts(spec, prompt, n_visual);
    let baseline = parts(spec, &PromptSpec::new(Strategy::Common, 1), n_visual).total();
    let total = p.total();
    Ok(FlopsReport {
        prompt: *prompt,
        seq_lens: p.seq_lens,
        token_count: p.token_count,
        projection_macs: p.projection,
        attention_macs: p.attention,
        prompt_macs: p.prompt,
        head_macs: p.head,
        total_macs: total,
        baseline_macs: baseline,
        ratio: total as f64 / baseline as f64,
    })
}
