//! Visual prompt construction and the split forward pass.
//!
//! Dynamic prompts are produced by multi-head cross-attention from a text
//! query over projected visual features and spliced in front of the text
//! (encoder models) or the decoder input vector (encoder-decoder models)
//! right before the insertion layer.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DvpError, Result};
use crate::numerics::{AttnShape, Rng, Tape, Tensor, Var};
use crate::transformer::{
    pool_graph, CrossContext, GradMode, Graph, Model, ModelKind, ModelSpec, PoolMode, Stack,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Every projected visual token prepended at layer 1.
    Common,
    /// Only the visual classification row, projected, at layer 1.
    Cls,
    /// One generated token from a pooled text query.
    DvpSingle,
    /// One generated token per text row.
    DvpMulti,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Common, Strategy::Cls, Strategy::DvpMulti, Strategy::DvpSingle];

    pub fn is_dynamic(self) -> bool {
        matches!(self, Strategy::DvpSingle | Strategy::DvpMulti)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Common => "common",
            Strategy::Cls => "cls",
            Strategy::DvpSingle => "dvp-single",
            Strategy::DvpMulti => "dvp-multi",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = DvpError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy {s}")))
    }
}

/// Strategy plus insertion layer (1-based). Dynamic strategies read their
/// generator from the model slot matching `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub strategy: Strategy,
    pub layer: usize,
}

impl PromptSpec {
    pub fn new(strategy: Strategy, layer: usize) -> Self {
        PromptSpec { strategy, layer }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layer < 1 || self.layer > spec.layers {
            return Err(DvpError::OutOfRange { what: "insertion layer", value: self.layer, lo: 1, hi: spec.layers });
        }
        if !self.strategy.is_dynamic() && self.layer != 1 {
            return Err(invalid(format!("{} prompting is inserted at layer 1", self.strategy)));
        }
        Ok(())
    }

    /// Number of prompt rows added to the sequence.
    pub fn prompt_len(&self, spec: &ModelSpec, n_visual: usize) -> usize {
        match self.strategy {
            Strategy::Common => n_visual,
            Strategy::Cls | Strategy::DvpSingle => 1,
            Strategy::DvpMulti => spec.text_len,
        }
    }
}

/// Cross-attention prompt generator. Head `i` uses column block `i` of each
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerator {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub n_heads: usize,
}

pub fn generator_prefix(slot: usize) -> String {
    format!("prompt.gen{slot}")
}

const GEN_NAMES: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

impl PromptGenerator {
    pub fn new(width: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !width.is_multiple_of(n_heads) {
            return Err(invalid(format!("generator width {width} not divisible by {n_heads} heads")));
        }
        let mut w = || Tensor::uniform_init(&[width, width], width, rng);
        Ok(PromptGenerator { w_q: w(), w_k: w(), w_v: w(), w_o: w(), n_heads })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    /// Copies this generator into `model` under slot `slot`.
    pub fn install(&self, model: &mut Model, slot: usize) -> Result<()> {
        let pre = generator_prefix(slot);
        for (name, t) in GEN_NAMES.iter().zip(self.tensors()) {
            model.params.insert(format!("{pre}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_model(model: &Model, slot: usize) -> Result<Self> {
        let pre = generator_prefix(slot);
        let get = |n: &str| model.params.get(&format!("{pre}.{n}")).cloned();
        Ok(PromptGenerator {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
            n_heads: model.spec.heads,
        })
    }
}

/// Adds a freshly initialized generator for `slot` to `model`.
pub fn install_generator(model: &mut Model, slot: usize, rng: &mut Rng) -> Result<()> {
    PromptGenerator::new(model.spec.width, model.spec.heads, rng)?.install(model, slot)
}

/// Adds whatever `spec` needs that the model lacks.
pub fn prepare_model(model: &mut Model, spec: &PromptSpec, rng: &mut Rng) -> Result<()> {
    spec.validate(&model.spec)?;
    if spec.strategy.is_dynamic() && !model.params.contains(&format!("{}.w_q", generator_prefix(spec.layer))) {
        install_generator(model, spec.layer, rng)?;
    }
    Ok(())
}

/// Visual tokens of one example; row 0 is the global classification row.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub features: Tensor,
}

impl VisualFeatures {
    pub const CLS_INDEX: usize = 0;

    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(invalid("visual features must be a matrix"));
        }
        Ok(VisualFeatures { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// Cross-attention on the tape. `query` holds `batch * q_len` rows and
/// `visual` holds `batch * n_visual` rows, both of the generator width.
pub fn generate_dvp_tape(
    tape: &mut Tape,
    weights: [Var; 4],
    query: Var,
    visual: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    generate_with_attention(tape, weights, query, visual, batch, heads).map(|(out, _)| out)
}

/// Returns `(prompt rows, attention node)`.
fn generate_with_attention(
    tape: &mut Tape,
    weights: [Var; 4],
    query: Var,
    visual: Var,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let [w_q, w_k, w_v, w_o] = weights;
    let d = tape.value(w_q).rows();
    let (tq, tv) = (tape.value(query), tape.value(visual));
    if tq.cols() != d || tv.cols() != d {
        return Err(DvpError::ShapeMismatch {
            op: "generate_dvp",
            left: tq.shape().to_vec(),
            right: tv.shape().to_vec(),
        });
    }
    if batch == 0 || tq.rows() % batch != 0 || tv.rows() % batch != 0 {
        return Err(invalid("generate_dvp: rows not divisible by batch"));
    }
    let shape = AttnShape { batch, heads, q_len: tq.rows() / batch, kv_len: tv.rows() / batch };
    let q = tape.matmul(query, w_q)?;
    let k = tape.matmul(visual, w_k)?;
    let v = tape.matmul(visual, w_v)?;
    let a = tape.attention(q, k, v, shape)?;
    Ok((tape.matmul(a, w_o)?, a))
}

fn generate_dvp_graph(g: &mut Graph, slot: usize, query: Var, visual: Var, batch: usize, heads: usize) -> Result<Var> {
    let pre = generator_prefix(slot);
    let mut w = [query; 4];
    for (dst, name) in w.iter_mut().zip(GEN_NAMES) {
        *dst = g.param(&format!("{pre}.{name}"))?;
    }
    let (out, attn) = generate_with_attention(&mut g.tape, w, query, visual, batch, heads)?;
    g.record_attention(pre, attn);
    Ok(out)
}

/// Dynamic prompt tokens for one example: `[q x d]` from a `[q x d]` query
/// and `[N x d]` projected visual features.
pub fn generate_dvp(gen: &PromptGenerator, query: &Tensor, visual: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = gen.tensors().map(|t| tape.constant(t.clone()));
    let q = tape.constant(query.clone());
    let v = tape.constant(visual.clone());
    let out = generate_dvp_tape(&mut tape, w, q, v, 1, gen.n_heads)?;
    Ok(tape.value(out).clone())
}

/// Query rows for the generator from the text state feeding the insertion
/// point.
pub fn make_query(kind: ModelKind, text_state: &Tensor, strategy: Strategy) -> Result<Tensor> {
    match strategy {
        Strategy::Common | Strategy::Cls => Err(invalid(format!("{strategy} prompting takes no query"))),
        Strategy::DvpMulti => Ok(text_state.clone()),
        Strategy::DvpSingle => {
            let mode = match kind {
                ModelKind::Encoder => PoolMode::Cls,
                ModelKind::EncoderDecoder => PoolMode::Mean,
            };
            crate::transformer::pool(text_state, mode)
        }
    }
}

fn make_query_graph(
    g: &mut Graph,
    kind: ModelKind,
    text: Var,
    batch: usize,
    seq: usize,
    strategy: Strategy,
) -> Result<(Var, usize)> {
    match strategy {
        Strategy::Common | Strategy::Cls => Err(invalid(format!("{strategy} prompting takes no query"))),
        Strategy::DvpMulti => Ok((text, seq)),
        Strategy::DvpSingle => {
            let mode = match kind {
                ModelKind::Encoder => PoolMode::Cls,
                ModelKind::EncoderDecoder => PoolMode::Mean,
            };
            Ok((pool_graph(g, text, batch, seq, mode, 0)?, 1))
        }
    }
}

/// Interleaves `prefix_len` prompt rows in front of `body_len` rows, per
/// example.
fn splice(g: &mut Graph, prefix: Var, prefix_len: usize, body: Var, body_len: usize, batch: usize) -> Result<Var> {
    let mut index = Vec::with_capacity(batch * (prefix_len + body_len));
    for b in 0..batch {
        index.extend((0..prefix_len).map(|r| (0, b * prefix_len + r)));
        index.extend((0..body_len).map(|r| (1, b * body_len + r)));
    }
    g.tape.gather_rows(&[prefix, body], index)
}

/// Graph-level result of a prompted forward pass.
pub struct PromptedForward {
    pub logits: Var,
    /// Sequence length entering each layer of the prompted stack.
    pub seq_lens: Vec<usize>,
    /// Text hidden state right before the insertion layer (`batch * L`
    /// rows), encoder models only.
    pub pre_insertion: Option<Var>,
}

/// Projected visual features `[batch * N x d]`.
fn project_visual(model: &Model, g: &mut Graph, feats: &[&Tensor]) -> Result<(Var, usize)> {
    let first = feats.first().ok_or_else(|| invalid("empty batch"))?;
    let (n, dv) = (first.rows(), first.cols());
    if dv != model.spec.visual_width {
        return Err(DvpError::ShapeMismatch {
            op: "visual projector",
            left: first.shape().to_vec(),
            right: vec![model.spec.visual_width, model.spec.width],
        });
    }
    let mut data = Vec::with_capacity(feats.len() * n * dv);
    for f in feats {
        if f.rows() != n || f.cols() != dv {
            return Err(invalid("visual features differ in shape within a batch"));
        }
        data.extend_from_slice(f.data());
    }
    let raw = g.tape.constant(Tensor::matrix(feats.len() * n, dv, data)?);
    let w = g.param("prompt.proj.w")?;
    Ok((g.tape.matmul(raw, w)?, n))
}

/// Static prompt rows for `Common` / `Cls`, `(rows, per-example length)`.
fn static_prompt(g: &mut Graph, projected: Var, n: usize, batch: usize, strategy: Strategy) -> Result<(Var, usize)> {
    match strategy {
        Strategy::Common => Ok((projected, n)),
        Strategy::Cls => {
            let rows = (0..batch).map(|b| (0, b * n + VisualFeatures::CLS_INDEX)).collect();
            Ok((g.tape.gather_rows(&[projected], rows)?, 1))
        }
        _ => unreachable!("dynamic strategies build prompts from a query"),
    }
}

/// Batched forward pass with prompt insertion. Logits are `[batch x classes]`.
pub fn forward_graph(
    model: &Model,
    g: &mut Graph,
    spec: &PromptSpec,
    tokens: &[&[usize]],
    feats: &[&Tensor],
) -> Result<PromptedForward> {
    spec.validate(&model.spec)?;
    let batch = tokens.len();
    if batch == 0 || feats.len() != batch {
        return Err(invalid(format!("batch of {batch} token rows and {} feature sets", feats.len())));
    }
    let m = model.spec.layers;
    let l = model.spec.text_len;
    let k = spec.layer;
    let heads = model.spec.heads;
    let text = model.embed(g, tokens)?;
    let (visual, n) = project_visual(model, g, feats)?;
    let q_len = spec.prompt_len(&model.spec, n);

    match model.spec.kind {
        ModelKind::Encoder => {
            let before = model.run_layers(g, Stack::Encoder, text, batch, l, 1, k - 1, None)?;
            let prompt = if spec.strategy.is_dynamic() {
                let (query, _) = make_query_graph(g, ModelKind::Encoder, before, batch, l, spec.strategy)?;
                generate_dvp_graph(g, k, query, visual, batch, heads)?
            } else {
                static_prompt(g, visual, n, batch, spec.strategy)?.0
            };
            let seq = splice(g, prompt, q_len, before, l, batch)?;
            let after = model.run_layers(g, Stack::Encoder, seq, batch, q_len + l, k, m, None)?;
            let pooled = pool_graph(g, after, batch, q_len + l, PoolMode::Cls, q_len)?;
            let logits = model.classify(g, pooled)?;
            let seq_lens = (1..=m).map(|i| if i < k { l } else { l + q_len }).collect();
            Ok(PromptedForward { logits, seq_lens, pre_insertion: Some(before) })
        }
        ModelKind::EncoderDecoder => {
            let encoded = model.run_layers(g, Stack::Encoder, text, batch, l, 1, m, None)?;
            let ctx = CrossContext { var: encoded, len: l };
            let f = model.decoder_input(g, batch)?;
            let before = model.run_layers(g, Stack::Decoder, f, batch, 1, 1, k - 1, Some(ctx))?;
            let prompt = if spec.strategy.is_dynamic() {
                let (query, _) = make_query_graph(g, ModelKind::EncoderDecoder, encoded, batch, l, spec.strategy)?;
                generate_dvp_graph(g, k, query, visual, batch, heads)?
            } else {
                static_prompt(g, visual, n, batch, spec.strategy)?.0
            };
            let seq = splice(g, prompt, q_len, before, 1, batch)?;
            let after = model.run_layers(g, Stack::Decoder, seq, batch, q_len + 1, k, m, Some(ctx))?;
            let pooled = pool_graph(g, after, batch, q_len + 1, PoolMode::Cls, q_len)?;
            let logits = model.classify(g, pooled)?;
            let seq_lens = (1..=m).map(|i| if i < k { 1 } else { 1 + q_len }).collect();
            Ok(PromptedForward { logits, seq_lens, pre_insertion: None })
        }
    }
}

/// Head-averaged attention matrix of one layer, `rows = query`, `cols = key`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub site: String,
    pub layer: usize,
    pub matrix: Tensor,
}

#[derive(Clone, Debug)]
pub struct PromptOutput {
    pub logits: Tensor,
    pub seq_lens: Vec<usize>,
    /// Self-attention of the prompted stack, one entry per layer.
    pub attn_dump: Option<Vec<LayerAttention>>,
}

/// Single-example forward pass, optionally collecting attention maps.
pub fn forward_with_prompt(
    model: &Model,
    spec: &PromptSpec,
    tokens: &[usize],
    feats: &VisualFeatures,
    dump: bool,
) -> Result<PromptOutput> {
    let mut g = model.graph(GradMode::None);
    let out = forward_graph(model, &mut g, spec, &[tokens], &[&feats.features])?;
    let attn_dump = dump.then(|| collect_attention(model, &g)).transpose()?;
    Ok(PromptOutput { logits: g.tape.value(out.logits).clone(), seq_lens: out.seq_lens, attn_dump })
}

fn collect_attention(model: &Model, g: &Graph) -> Result<Vec<LayerAttention>> {
    let stack = match model.spec.kind {
        ModelKind::Encoder => "enc",
        ModelKind::EncoderDecoder => "dec",
    };
    let mut out = Vec::new();
    for rec in g.attention_log() {
        let mut parts = rec.site.split('.');
        let (Some(s), Some(layer), Some("attn")) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        if s != stack {
            continue;
        }
        let layer: usize = layer.parse().map_err(|_| invalid("bad attention site"))?;
        let (probs, shape) = g
            .tape
            .attention_probs(rec.var)
            .ok_or_else(|| invalid("attention record without probabilities"))?;
        let cells = shape.q_len * shape.kv_len;
        let mut avg = vec![0.0; cells];
        for h in 0..shape.heads {
            for (a, p) in avg.iter_mut().zip(&probs[h * cells..(h + 1) * cells]) {
                *a += p / shape.heads as f64;
            }
        }
        out.push(LayerAttention {
            site: rec.site.clone(),
            layer,
            matrix: Tensor::matrix(shape.q_len, shape.kv_len, avg)?,
        });
    }
    Ok(out)
}
