//! Residual bottleneck adapters and the freeze policy that goes with them.
//!
//! An adapter maps `X` to `X + (gelu(X W_D + b_D)) W_U + b_U`. The up
//! projection and its bias start at zero, so a freshly attached adapter is
//! the identity.

use crate::error::{invalid, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::transformer::{attention_sites, GradMode, Graph, Model, ModelKind, ModelSpec, Stack};

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
}

/// Parameters added by one adapter with input width `d_i` and bottleneck
/// `d_h`.
pub fn adapter_param_count(d_i: usize, d_h: usize) -> usize {
    2 * d_i * d_h + d_i + d_h
}

impl Adapter {
    pub fn new(d_i: usize, d_h: usize, rng: &mut Rng) -> Result<Self> {
        if d_h == 0 || d_h >= d_i {
            return Err(invalid(format!("adapter bottleneck {d_h} must be in 1..{d_i}")));
        }
        Ok(Adapter {
            w_down: Tensor::uniform_init(&[d_i, d_h], d_i, rng),
            b_down: Tensor::zeros(&[d_h]),
            w_up: Tensor::zeros(&[d_h, d_i]),
            b_up: Tensor::zeros(&[d_i]),
        })
    }

    pub fn input_width(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    /// Eager forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = [&self.w_down, &self.b_down, &self.w_up, &self.b_up].map(|t| tape.constant(t.clone()));
        let out = adapter_forward_tape(&mut tape, vars, xv)?;
        Ok(tape.value(out).clone())
    }
}

pub fn adapter_forward(a: &Adapter, x: &Tensor) -> Result<Tensor> {
    a.forward(x)
}

/// `[w_down, b_down, w_up, b_up]` already on the tape.
pub fn adapter_forward_tape(tape: &mut Tape, p: [Var; 4], x: Var) -> Result<Var> {
    let [w_down, b_down, w_up, b_up] = p;
    let d_i = tape.value(w_down).rows();
    if tape.value(x).cols() != d_i {
        return Err(crate::DvpError::ShapeMismatch {
            op: "adapter",
            left: tape.value(x).shape().to_vec(),
            right: tape.value(w_down).shape().to_vec(),
        });
    }
    let hidden = tape.linear(x, w_down, Some(b_down))?;
    let act = tape.gelu(hidden)?;
    let up = tape.linear(act, w_up, Some(b_up))?;
    tape.add(x, up)
}

pub(crate) fn adapter_forward_graph(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let p = [
        g.param(&format!("{prefix}.w_down"))?,
        g.param(&format!("{prefix}.b_down"))?,
        g.param(&format!("{prefix}.w_up"))?,
        g.param(&format!("{prefix}.b_up"))?,
    ];
    adapter_forward_tape(&mut g.tape, p, x)
}

/// Sublayer sites that receive an adapter, as parameter-name prefixes.
pub fn adapter_sites(model: &Model) -> Vec<String> {
    let mut stacks = vec![Stack::Encoder];
    if model.spec.kind == ModelKind::EncoderDecoder {
        stacks.push(Stack::Decoder);
    }
    let mut sites = Vec::new();
    for stack in stacks {
        for l in 1..=model.spec.layers {
            for site in attention_sites(stack).iter().chain(&["ffn"]) {
                sites.push(format!("{}.{l}.{site}", stack.prefix()));
            }
        }
    }
    sites
}

/// Inserts an adapter after every attention and feed-forward sublayer and
/// switches the model to adapter-only training.
pub fn attach_adapters(mut model: Model, d_h: usize, rng: &mut Rng) -> Result<Model> {
    if model.adapter_width.is_some() {
        return Err(invalid("adapters already attached"));
    }
    let d = model.spec.width;
    if d_h == 0 || d_h >= d {
        return Err(invalid(format!("adapter bottleneck {d_h} must be in 1..{d}")));
    }
    for site in adapter_sites(&model) {
        let a = Adapter::new(d, d_h, rng)?;
        let pre = format!("{site}.adapter");
        model.params.insert(format!("{pre}.w_down"), a.w_down)?;
        model.params.insert(format!("{pre}.b_down"), a.b_down)?;
        model.params.insert(format!("{pre}.w_up"), a.w_up)?;
        model.params.insert(format!("{pre}.b_up"), a.b_up)?;
    }
    model.adapter_width = Some(d_h);
    Ok(model)
}

/// Default bottleneck: an eighth of the model width.
pub fn default_bottleneck(width: usize) -> usize {
    (width / 8).max(1)
}

/// Parameter totals computed from shapes alone, for models too large to
/// allocate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBudget {
    pub total: usize,
    pub trainable: usize,
    /// Classification head weights and bias.
    pub head: usize,
}

impl ParamBudget {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    /// Trainable share with the classification head left out of both counts.
    pub fn fraction_excluding_head(&self) -> f64 {
        (self.trainable - self.head) as f64 / (self.total - self.head) as f64
    }
}

/// Counts what [`Model::new`] plus `generators` prompt generators and
/// optional adapters would allocate, split by the matching freeze policy.
pub fn param_budget(spec: &ModelSpec, adapter_width: Option<usize>, generators: usize) -> ParamBudget {
    let d = spec.width;
    let f = spec.ffn_width();
    let stacks = match spec.kind {
        ModelKind::Encoder => vec![Stack::Encoder],
        ModelKind::EncoderDecoder => vec![Stack::Encoder, Stack::Decoder],
    };
    let (mut frozen, mut norms, mut sites) = ((spec.vocab + spec.text_len) * d, 0, 0);
    for stack in stacks {
        let attn = attention_sites(stack).len();
        frozen += spec.layers * (attn * 4 * (d * d + d) + d * f + f + f * d + d);
        norms += spec.layers * (attn + 1) * 2 * d;
        sites += spec.layers * (attn + 1);
    }
    if spec.kind == ModelKind::EncoderDecoder {
        frozen += d;
    }
    let head = d * spec.num_classes + spec.num_classes;
    let prompt = spec.visual_width * d + generators * 4 * d * d;
    let adapters = adapter_width.map_or(0, |h| sites * adapter_param_count(d, h));
    let total = frozen + norms + head + prompt + adapters;
    let trainable = match adapter_width {
        Some(_) => norms + head + prompt + adapters,
        None => total,
    };
    ParamBudget { total, trainable, head }
}

/// Splits parameters into trainable and frozen by name.
///
/// With `adapters_only`, adapters, prompt generators, the visual projector,
/// the classification head and layer norms train; everything else is frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezePolicy {
    pub adapters_only: bool,
}

impl FreezePolicy {
    pub fn is_trainable(&self, name: &str) -> bool {
        if !self.adapters_only {
            return true;
        }
        name.contains(".adapter.")
            || name.starts_with("prompt.")
            || name.starts_with("head.")
            || name.contains(".ln.")
    }

    pub fn grad_mode(&self) -> GradMode {
        GradMode::Policy(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng};

    #[test]
    fn zero_up_projection_is_identity() {
        let mut rng = seeded_rng(3);
        let a = Adapter::new(4, 2, &mut rng).unwrap();
        let x = Tensor::uniform_init(&[3, 4], 1, &mut rng);
        assert_eq!(a.forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_computed_hidden_zero() {
        let a = Adapter {
            w_down: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
            b_down: Tensor::zeros(&[1]),
            w_up: Tensor::matrix(1, 2, vec![0.7, -0.3]).unwrap(),
            b_up: Tensor::zeros(&[2]),
        };
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        assert_eq!(a.forward(&x).unwrap(), x);
    }

    #[test]
    fn rejects_bad_widths() {
        let mut rng = seeded_rng(0);
        assert!(Adapter::new(4, 4, &mut rng).is_err());
        assert!(Adapter::new(4, 0, &mut rng).is_err());
        let a = Adapter::new(4, 2, &mut rng).unwrap();
        assert!(a.forward(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn paper_scale_adapter_size() {
        assert_eq!(adapter_param_count(768, 96), 148_320);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = seeded_rng(11);
        let params = vec![
            Tensor::uniform_init(&[3, 5], 1, &mut rng),
            Tensor::uniform_init(&[5, 2], 1, &mut rng),
            Tensor::uniform_init(&[2], 1, &mut rng),
            Tensor::uniform_init(&[2, 5], 1, &mut rng),
            Tensor::uniform_init(&[5], 1, &mut rng),
        ];
        let report = grad_check(
            |t, v| {
                let o = adapter_forward_tape(t, [v[1], v[2], v[3], v[4]], v[0])?;
                let sq = t.mul(o, o)?;
                Ok(t.sum(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn budget_matches_allocated_model() {
        for kind in [ModelKind::Encoder, ModelKind::EncoderDecoder] {
            let spec = ModelSpec {
                kind,
                layers: 2,
                width: 8,
                heads: 2,
                ffn_mult: 2,
                vocab: 11,
                text_len: 4,
                num_classes: 3,
                visual_width: 5,
            };
            let mut rng = seeded_rng(1);
            let mut model = Model::new(spec.clone(), &mut rng).unwrap();
            crate::prompt::install_generator(&mut model, 2, &mut rng).unwrap();
            let full = model.count_params();
            let b = param_budget(&spec, None, 1);
            assert_eq!((b.total, b.trainable), (full.total, full.trainable));
            let model = attach_adapters(model, 2, &mut rng).unwrap();
            let count = model.count_params();
            let b = param_budget(&spec, Some(2), 1);
            assert_eq!((b.total, b.trainable), (count.total, count.trainable));
        }
    }

    #[test]
    fn freeze_policy_partitions_names() {
        let p = FreezePolicy { adapters_only: true };
        assert!(p.is_trainable("enc.1.attn.adapter.w_up"));
        assert!(p.is_trainable("enc.3.ffn.ln.gain"));
        assert!(p.is_trainable("prompt.gen4.w_q"));
        assert!(p.is_trainable("head.w"));
        assert!(!p.is_trainable("enc.1.attn.q.w"));
        assert!(!p.is_trainable("embed.token"));
        assert!(!p.is_trainable("dec.input"));
        assert!(FreezePolicy::default().is_trainable("embed.token"));
    }
}
