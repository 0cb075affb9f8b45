use serde::{Deserialize, Serialize};

use super::params::{GradMode, Graph, ParamStore};
use super::spec::{ModelKind, ModelSpec};
use crate::adapter::{self, FreezePolicy};
use crate::error::{invalid, DvpError, Result};
use crate::numerics::{AttnShape, Rng, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const PAD_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    Cls,
    Mean,
}

/// Keys/values for decoder cross-attention: `batch * len` rows.
#[derive(Clone, Copy, Debug)]
pub struct CrossContext {
    pub var: Var,
    pub len: usize,
}

/// Backbone, head, visual projector and any installed prompt generators.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    /// Bottleneck width when adapters are attached.
    pub adapter_width: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCount {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

fn add_linear(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    p.insert(format!("{name}.w"), Tensor::uniform_init(&[fan_in, fan_out], fan_in, rng))?;
    p.insert(format!("{name}.b"), Tensor::uniform_init(&[fan_out], fan_in, rng))
}

fn add_norm(p: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    p.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
    p.insert(format!("{name}.bias"), Tensor::zeros(&[d]))
}

/// Attention sublayers of one layer in a stack.
pub(crate) fn attention_sites(stack: Stack) -> &'static [&'static str] {
    match stack {
        Stack::Encoder => &["attn"],
        Stack::Decoder => &["attn", "cross"],
    }
}

impl Model {
    /// Fresh model; weight matrices and biases uniform in
    /// `±1/sqrt(fan_in)`, embeddings with `fan_in = width`, norms at identity.
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.width;
        let mut p = ParamStore::new();
        p.insert("embed.token", Tensor::uniform_init(&[spec.vocab, d], d, rng))?;
        p.insert("embed.pos", Tensor::uniform_init(&[spec.text_len, d], d, rng))?;
        let mut stacks = vec![Stack::Encoder];
        if spec.kind == ModelKind::EncoderDecoder {
            stacks.push(Stack::Decoder);
        }
        for stack in stacks {
            for l in 1..=spec.layers {
                let pre = format!("{}.{l}", stack.prefix());
                for site in attention_sites(stack) {
                    for proj in ["q", "k", "v", "o"] {
                        add_linear(&mut p, &format!("{pre}.{site}.{proj}"), d, d, rng)?;
                    }
                    add_norm(&mut p, &format!("{pre}.{site}.ln"), d)?;
                }
                add_linear(&mut p, &format!("{pre}.ffn.up"), d, spec.ffn_width(), rng)?;
                add_linear(&mut p, &format!("{pre}.ffn.down"), spec.ffn_width(), d, rng)?;
                add_norm(&mut p, &format!("{pre}.ffn.ln"), d)?;
            }
        }
        if spec.kind == ModelKind::EncoderDecoder {
            p.insert("dec.input", Tensor::uniform_init(&[1, d], d, rng))?;
        }
        add_linear(&mut p, "head", d, spec.num_classes, rng)?;
        p.insert(
            "prompt.proj.w",
            Tensor::uniform_init(&[spec.visual_width, d], spec.visual_width, rng),
        )?;
        Ok(Model { spec, params: p, adapter_width: None })
    }

    pub fn graph(&self, mode: GradMode) -> Graph<'_> {
        Graph::new(&self.params, mode)
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        FreezePolicy { adapters_only: self.adapter_width.is_some() }
    }

    /// Gradient mode for training under the active freeze policy.
    pub fn train_mode(&self) -> GradMode {
        if self.adapter_width.is_some() {
            GradMode::Policy(self.freeze_policy())
        } else {
            GradMode::All
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.spec.text_len {
            return Err(invalid(format!(
                "expected {} tokens, got {}",
                self.spec.text_len,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.spec.vocab) {
            return Err(DvpError::OutOfRange { what: "token", value: bad, lo: 0, hi: self.spec.vocab - 1 });
        }
        Ok(())
    }

    /// Token plus position embeddings for a batch: `batch * text_len` rows.
    pub fn embed(&self, g: &mut Graph, batch: &[&[usize]]) -> Result<Var> {
        for t in batch {
            self.check_tokens(t)?;
        }
        let tok = g.param("embed.token")?;
        let pos = g.param("embed.pos")?;
        let ids = batch.iter().flat_map(|t| t.iter().map(|&id| (0, id))).collect();
        let positions = batch
            .iter()
            .flat_map(|_| (0..self.spec.text_len).map(|i| (0, i)))
            .collect();
        let e = g.tape.gather_rows(&[tok], ids)?;
        let p = g.tape.gather_rows(&[pos], positions)?;
        g.tape.add(e, p)
    }

    /// The learned decoder input vector repeated once per example.
    pub fn decoder_input(&self, g: &mut Graph, batch: usize) -> Result<Var> {
        let f = g.param("dec.input")?;
        g.tape.gather_rows(&[f], vec![(0, 0); batch])
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = g.param(&format!("{name}.w"))?;
        let b = g.param(&format!("{name}.b"))?;
        g.tape.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gain = g.param(&format!("{name}.gain"))?;
        let bias = g.param(&format!("{name}.bias"))?;
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Residual sublayer: `LN(x + adapter(sub))`.
    fn residual(&self, g: &mut Graph, site: &str, x: Var, sub: Var) -> Result<Var> {
        let sub = if self.adapter_width.is_some() {
            adapter::adapter_forward_graph(g, &format!("{site}.adapter"), sub)?
        } else {
            sub
        };
        let sum = g.tape.add(x, sub)?;
        self.norm(g, &format!("{site}.ln"), sum)
    }

    fn attention(
        &self,
        g: &mut Graph,
        site: &str,
        x: Var,
        source: Var,
        shape: AttnShape,
    ) -> Result<Var> {
        let q = self.linear(g, &format!("{site}.q"), x)?;
        let k = self.linear(g, &format!("{site}.k"), source)?;
        let v = self.linear(g, &format!("{site}.v"), source)?;
        let a = g.tape.attention(q, k, v, shape)?;
        g.record_attention(site.to_string(), a);
        self.linear(g, &format!("{site}.o"), a)
    }

    /// Applies layers `from..=to` of `stack` to `batch` sequences of `seq`
    /// rows each. An empty range (`from > to`) is the identity.
    #[allow(clippy::too_many_arguments)]
    pub fn run_layers(
        &self,
        g: &mut Graph,
        stack: Stack,
        x: Var,
        batch: usize,
        seq: usize,
        from: usize,
        to: usize,
        cross: Option<CrossContext>,
    ) -> Result<Var> {
        let m = self.spec.layers;
        if from < 1 || from > m + 1 || to > m {
            return Err(invalid(format!("layer range {from}..={to} outside 1..={m}")));
        }
        match (stack, cross.is_some()) {
            (Stack::Decoder, false) => return Err(invalid("decoder layers need a cross-attention context")),
            (Stack::Encoder, true) => return Err(invalid("encoder layers take no cross-attention context")),
            _ => {}
        }
        if stack == Stack::Decoder && self.spec.kind != ModelKind::EncoderDecoder {
            return Err(invalid("encoder-only model has no decoder stack"));
        }
        let heads = self.spec.heads;
        let mut h = x;
        for l in from..=to {
            let pre = format!("{}.{l}", stack.prefix());
            let site = format!("{pre}.attn");
            let self_shape = AttnShape { batch, heads, q_len: seq, kv_len: seq };
            let a = self.attention(g, &site, h, h, self_shape)?;
            h = self.residual(g, &site, h, a)?;
            if let Some(ctx) = cross {
                let site = format!("{pre}.cross");
                let shape = AttnShape { batch, heads, q_len: seq, kv_len: ctx.len };
                let c = self.attention(g, &site, h, ctx.var, shape)?;
                h = self.residual(g, &site, h, c)?;
            }
            let site = format!("{pre}.ffn");
            let up = self.linear(g, &format!("{site}.up"), h)?;
            let act = g.tape.gelu(up)?;
            let down = self.linear(g, &format!("{site}.down"), act)?;
            h = self.residual(g, &site, h, down)?;
        }
        Ok(h)
    }

    /// Logits from pooled `[batch x width]` features.
    pub fn classify(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let width = g.tape.value(pooled).cols();
        if width != self.spec.width {
            return Err(invalid(format!("classify: width {width}, model width {}", self.spec.width)));
        }
        self.linear(g, "head", pooled)
    }

    /// Single-sequence embedding `[text_len x width]`.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = self.graph(GradMode::None);
        let v = self.embed(&mut g, &[tokens])?;
        Ok(g.tape.value(v).clone())
    }

    /// Single-sequence [`Model::run_layers`] on plain tensors.
    pub fn run_layers_on(
        &self,
        stack: Stack,
        x: &Tensor,
        from: usize,
        to: usize,
        cross: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = self.graph(GradMode::None);
        let xv = g.tape.constant(x.clone());
        let ctx = cross.map(|c| CrossContext { var: g.tape.constant(c.clone()), len: c.rows() });
        let out = self.run_layers(&mut g, stack, xv, 1, x.rows(), from, to, ctx)?;
        Ok(g.tape.value(out).clone())
    }

    pub fn classify_on(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut g = self.graph(GradMode::None);
        let x = g.tape.constant(pooled.clone());
        let out = self.classify(&mut g, x)?;
        Ok(g.tape.value(out).clone())
    }

    /// Exact parameter counts; trainable per the active freeze policy.
    pub fn count_params(&self) -> ParamCount {
        count_params(&self.params, &self.train_mode())
    }
}

pub fn count_params(params: &ParamStore, mode: &GradMode) -> ParamCount {
    let total = params.numel();
    let trainable = params
        .iter()
        .filter(|(name, _)| match mode {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::Policy(p) => p.is_trainable(name),
        })
        .map(|(_, t)| t.len())
        .sum();
    ParamCount { total, trainable }
}

/// Pools `batch` sequences of `seq` rows: `Cls` takes row `cls_index` of
/// each sequence, `Mean` averages all rows.
pub fn pool_graph(
    g: &mut Graph,
    x: Var,
    batch: usize,
    seq: usize,
    mode: PoolMode,
    cls_index: usize,
) -> Result<Var> {
    if seq == 0 || batch == 0 {
        return Err(invalid("pool: empty sequence"));
    }
    match mode {
        PoolMode::Cls => {
            if cls_index >= seq {
                return Err(invalid("pool: classification index outside sequence"));
            }
            g.tape.gather_rows(&[x], (0..batch).map(|b| (0, b * seq + cls_index)).collect())
        }
        PoolMode::Mean => g.tape.group_mean(x, seq),
    }
}

/// Pools a single `[S x d]` sequence into `[1 x d]`.
pub fn pool(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if x.is_empty() || x.rows() == 0 {
        return Err(invalid("pool: empty sequence"));
    }
    let d = x.cols();
    let data = match mode {
        PoolMode::Cls => x.row(0).to_vec(),
        PoolMode::Mean => {
            let mut acc = vec![0.0; d];
            for r in 0..x.rows() {
                acc.iter_mut().zip(x.row(r)).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|v| v / x.rows() as f64).collect()
        }
    };
    Tensor::matrix(1, d, data)
}
