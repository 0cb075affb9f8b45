//! Model construction, split forward pass, adapters and checkpoints.

use dvp_core::adapter::{adapter_sites, attach_adapters, default_bottleneck, param_budget};
use dvp_core::numerics::{seeded_rng, Tensor};
use dvp_core::prompt::*;
use dvp_core::tasks::{gen_synthetic, LossKind, SyntheticTaskSpec};
use dvp_core::transformer::checkpoint;
use dvp_core::transformer::*;
use dvp_core::train::{train_step, OptimConfig, OptimizerKind, Optimizer};

fn spec(kind: ModelKind) -> ModelSpec {
    ModelSpec { kind, layers: 3, width: 16, heads: 4, ffn_mult: 2, vocab: 20, text_len: 5, num_classes: 4, visual_width: 6 }
}

fn model_with(kind: ModelKind, prompt: &PromptSpec, seed: u64) -> Model {
    let mut rng = seeded_rng(seed);
    let mut m = Model::new(spec(kind), &mut rng).unwrap();
    prepare_model(&mut m, prompt, &mut rng).unwrap();
    m
}

fn visual(seed: u64, n: usize) -> Tensor {
    Tensor::uniform_init(&[n, 6], 1, &mut seeded_rng(seed))
}

const TOKENS: [usize; 5] = [1, 9, 4, 17, 3];

#[test]
fn embedding_is_token_plus_position() {
    let m = model_with(ModelKind::Encoder, &PromptSpec::new(Strategy::DvpSingle, 1), 0);
    let pad = m.embed_text(&[PAD_TOKEN; 5]).unwrap();
    let tok = m.params.get("embed.token").unwrap();
    let pos = m.params.get("embed.pos").unwrap();
    for i in 0..5 {
        for j in 0..16 {
            assert_eq!(pad.get(i, j), tok.get(0, j) + pos.get(i, j));
        }
    }
    let a = m.embed_text(&TOKENS).unwrap();
    let b = m.embed_text(&[9, 1, 4, 17, 3]).unwrap();
    assert_ne!(a, b);
    assert!(m.embed_text(&[1, 2, 3, 4, 20]).is_err());
    assert!(m.embed_text(&[1, 2, 3]).is_err());
}

#[test]
fn layer_runs_compose_and_keep_shape() {
    let m = model_with(ModelKind::Encoder, &PromptSpec::new(Strategy::DvpSingle, 1), 1);
    let x = m.embed_text(&TOKENS).unwrap();
    let full = m.run_layers_on(Stack::Encoder, &x, 1, 3, None).unwrap();
    let half = m.run_layers_on(Stack::Encoder, &x, 1, 1, None).unwrap();
    let rest = m.run_layers_on(Stack::Encoder, &half, 2, 3, None).unwrap();
    assert_eq!(full, rest);
    assert_eq!(full.shape(), x.shape());
    assert_eq!(m.run_layers_on(Stack::Encoder, &x, 3, 2, None).unwrap(), x);
    assert!(m.run_layers_on(Stack::Encoder, &x, 1, 4, None).is_err());
    let longer = Tensor::uniform_init(&[9, 16], 1, &mut seeded_rng(2));
    assert_eq!(m.run_layers_on(Stack::Encoder, &longer, 1, 3, None).unwrap().shape(), &[9, 16]);
}

#[test]
fn pooling_examples() {
    let x = Tensor::from_rows(&[&[1.0, 1.0], &[3.0, 3.0]]).unwrap();
    assert_eq!(pool(&x, PoolMode::Mean).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(pool(&x, PoolMode::Cls).unwrap().data(), &[1.0, 1.0]);
    let one = Tensor::from_rows(&[&[0.3, -2.0]]).unwrap();
    assert_eq!(pool(&one, PoolMode::Mean).unwrap(), pool(&one, PoolMode::Cls).unwrap());
    assert!(pool(&Tensor::zeros(&[0, 2]), PoolMode::Mean).is_err());
}

#[test]
fn classify_is_affine() {
    let s = ModelSpec { width: 2, heads: 1, num_classes: 2, ..spec(ModelKind::Encoder) };
    let mut m = Model::new(s, &mut seeded_rng(0)).unwrap();
    *m.params.get_mut("head.w").unwrap() = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    *m.params.get_mut("head.b").unwrap() = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
    let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
    // x W + b = [1 - 3, 2 - 4] + b
    assert_eq!(m.classify_on(&x).unwrap().data(), &[-1.5, -3.0]);
    m.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
    m.params.get_mut("head.b").unwrap().data_mut().fill(0.0);
    assert!(m.classify_on(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(m.classify_on(&Tensor::zeros(&[1, 3])).is_err());
}

#[test]
fn param_counts_are_exact() {
    for kind in [ModelKind::Encoder, ModelKind::EncoderDecoder] {
        let m = model_with(kind, &PromptSpec::new(Strategy::DvpSingle, 2), 0);
        let brute: usize = m.params.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum();
        let c = m.count_params();
        assert_eq!(c.total, brute);
        assert_eq!(c.trainable, c.total);
        assert_eq!(m.params.contains("dec.input"), kind == ModelKind::EncoderDecoder);
        let b = param_budget(&m.spec, None, 1);
        assert_eq!(b.total, brute);
    }
}

#[test]
fn sequence_lengths_follow_the_strategy() {
    let feats = visual(0, 7);
    for (strategy, layer, want) in [
        (Strategy::DvpSingle, 2, vec![5, 6, 6]),
        (Strategy::DvpMulti, 3, vec![5, 5, 10]),
        (Strategy::Common, 1, vec![12, 12, 12]),
        (Strategy::Cls, 1, vec![6, 6, 6]),
    ] {
        let p = PromptSpec::new(strategy, layer);
        let m = model_with(ModelKind::Encoder, &p, 3);
        let out = forward_with_prompt(&m, &p, &TOKENS, &VisualFeatures::new(feats.clone()).unwrap(), false).unwrap();
        assert_eq!(out.seq_lens, want, "{strategy}");
    }
    let p = PromptSpec::new(Strategy::DvpSingle, 2);
    let m = model_with(ModelKind::EncoderDecoder, &p, 3);
    let out = forward_with_prompt(&m, &p, &TOKENS, &VisualFeatures::new(feats).unwrap(), false).unwrap();
    assert_eq!(out.seq_lens, vec![1, 2, 2]);
}

#[test]
fn static_strategies_only_at_layer_one() {
    let s = spec(ModelKind::Encoder);
    assert!(PromptSpec::new(Strategy::Common, 2).validate(&s).is_err());
    assert!(PromptSpec::new(Strategy::Cls, 3).validate(&s).is_err());
    assert!(PromptSpec::new(Strategy::DvpSingle, 3).validate(&s).is_ok());
    assert!(PromptSpec::new(Strategy::DvpSingle, 4).validate(&s).is_err());
    assert!(PromptSpec::new(Strategy::DvpSingle, 0).validate(&s).is_err());
}

#[test]
fn missing_generator_is_an_error() {
    let m = Model::new(spec(ModelKind::Encoder), &mut seeded_rng(0)).unwrap();
    let p = PromptSpec::new(Strategy::DvpSingle, 2);
    assert!(forward_with_prompt(&m, &p, &TOKENS, &VisualFeatures::new(visual(0, 4)).unwrap(), false).is_err());
}

#[test]
fn query_construction() {
    let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 6.0]]).unwrap();
    assert_eq!(make_query(ModelKind::Encoder, &x, Strategy::DvpSingle).unwrap().data(), &[1.0, 2.0]);
    assert_eq!(make_query(ModelKind::EncoderDecoder, &x, Strategy::DvpSingle).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(make_query(ModelKind::Encoder, &x, Strategy::DvpMulti).unwrap(), x);
    assert!(make_query(ModelKind::Encoder, &x, Strategy::Common).is_err());
}

#[test]
fn first_layer_insertion_equals_manual_concatenation() {
    let p = PromptSpec::new(Strategy::DvpSingle, 1);
    let m = model_with(ModelKind::Encoder, &p, 4);
    let feats = visual(5, 7);
    let out = forward_with_prompt(&m, &p, &TOKENS, &VisualFeatures::new(feats.clone()).unwrap(), false).unwrap();

    let text = m.embed_text(&TOKENS).unwrap();
    let query = pool(&text, PoolMode::Cls).unwrap();
    let projected = feats.matmul(m.params.get("prompt.proj.w").unwrap()).unwrap();
    let gen = PromptGenerator::from_model(&m, 1).unwrap();
    let token = generate_dvp(&gen, &query, &projected).unwrap();
    let mut rows: Vec<&[f64]> = vec![token.row(0)];
    rows.extend((0..5).map(|i| text.row(i)));
    let seq = Tensor::from_rows(&rows).unwrap();
    let h = m.run_layers_on(Stack::Encoder, &seq, 1, 3, None).unwrap();
    let cls = Tensor::matrix(1, 16, h.row(1).to_vec()).unwrap();
    let logits = m.classify_on(&cls).unwrap();
    assert!(logits.max_abs_diff(&out.logits) < 1e-12);
}

#[test]
fn prompt_does_not_leak_into_earlier_layers() {
    let p = PromptSpec::new(Strategy::DvpSingle, 3);
    let m = model_with(ModelKind::Encoder, &p, 6);
    let mut g = m.graph(GradMode::None);
    let feats = visual(1, 7);
    let out = forward_graph(&m, &mut g, &p, &[&TOKENS], &[&feats]).unwrap();
    let before = g.tape.value(out.pre_insertion.unwrap()).clone();
    let text_only = m.run_layers_on(Stack::Encoder, &m.embed_text(&TOKENS).unwrap(), 1, 2, None).unwrap();
    assert_eq!(before, text_only);
}

#[test]
fn dynamic_prompts_ignore_visual_row_order() {
    for kind in [ModelKind::Encoder, ModelKind::EncoderDecoder] {
        for strategy in [Strategy::DvpSingle, Strategy::DvpMulti] {
            let p = PromptSpec::new(strategy, 2);
            let m = model_with(kind, &p, 8);
            let feats = visual(9, 6);
            let order = [0, 4, 1, 5, 3, 2];
            let rows: Vec<&[f64]> = order.iter().map(|&r| feats.row(r)).collect();
            let permuted = Tensor::from_rows(&rows).unwrap();
            let a = forward_with_prompt(&m, &p, &TOKENS, &VisualFeatures::new(feats.clone()).unwrap(), false).unwrap();
            let b = forward_with_prompt(&m, &p, &TOKENS, &VisualFeatures::new(permuted).unwrap(), false).unwrap();
            assert!(a.logits.max_abs_diff(&b.logits) < 1e-12, "{kind:?} {strategy}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let p = PromptSpec::new(Strategy::DvpSingle, 2);
    let m = model_with(ModelKind::Encoder, &p, 2);
    let mut g = m.graph(GradMode::None);
    let feats = visual(3, 7);
    forward_graph(&m, &mut g, &p, &[&TOKENS, &[1, 2, 3, 4, 5]], &[&feats, &feats]).unwrap();
    let mut seen = 0;
    for rec in g.attention_log() {
        let (probs, shape) = g.tape.attention_probs(rec.var).unwrap();
        for row in probs.chunks(shape.kv_len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{}", rec.site);
        }
        seen += 1;
    }
    // three self-attention layers and the generator
    assert_eq!(seen, 4);
}

#[test]
fn one_step_moves_the_generator_query_weights() {
    let task = SyntheticTaskSpec { train_size: 16, val_size: 1, test_size: 1, ..Default::default() };
    let data = gen_synthetic(&task).unwrap();
    let s = ModelSpec { layers: 2, width: 16, heads: 2, ffn_mult: 2, vocab: 64, text_len: 8, num_classes: 8, visual_width: 32, kind: ModelKind::Encoder };
    let p = PromptSpec::new(Strategy::DvpSingle, 2);
    let mut rng = seeded_rng(0);
    let mut m = Model::new(s, &mut rng).unwrap();
    prepare_model(&mut m, &p, &mut rng).unwrap();
    let before = m.params.get("prompt.gen2.w_q").unwrap().clone();
    let cfg = OptimConfig { lr: 1e-2, ..OptimConfig::default() };
    let mut opt = Optimizer::new(cfg, 0).unwrap();
    let (loss, _) = train_step(&mut m, &p, &data.train, LossKind::Softmax, &mut opt).unwrap();
    assert!(loss > 0.0);
    assert_ne!(&before, m.params.get("prompt.gen2.w_q").unwrap());
}

#[test]
fn adapters_start_as_identity_on_the_whole_model() {
    for kind in [ModelKind::Encoder, ModelKind::EncoderDecoder] {
        let p = PromptSpec::new(Strategy::DvpSingle, 2);
        let m = model_with(kind, &p, 10);
        let feats = VisualFeatures::new(visual(11, 5)).unwrap();
        let plain = forward_with_prompt(&m, &p, &TOKENS, &feats, false).unwrap();
        let with = attach_adapters(m, default_bottleneck(16), &mut seeded_rng(1)).unwrap();
        let out = forward_with_prompt(&with, &p, &TOKENS, &feats, false).unwrap();
        assert_eq!(plain.logits, out.logits);
        let per_layer = if kind == ModelKind::Encoder { 2 } else { 2 + 3 };
        assert_eq!(adapter_sites(&with).len(), 3 * per_layer);
    }
    let twelve = Model::new(ModelSpec { layers: 12, ..spec(ModelKind::Encoder) }, &mut seeded_rng(0)).unwrap();
    let twelve = attach_adapters(twelve, 2, &mut seeded_rng(0)).unwrap();
    assert_eq!(adapter_sites(&twelve).len(), 24);
}

#[test]
fn frozen_parameters_are_bit_stable_under_training() {
    for kind in [OptimizerKind::Sgdw, OptimizerKind::Adamw] {
        let task = SyntheticTaskSpec { train_size: 64, val_size: 1, test_size: 1, ..Default::default() };
        let data = gen_synthetic(&task).unwrap();
        let s = ModelSpec { layers: 2, width: 16, heads: 2, ffn_mult: 2, vocab: 64, text_len: 8, num_classes: 8, visual_width: 32, kind: ModelKind::EncoderDecoder };
        let p = PromptSpec::new(Strategy::DvpSingle, 2);
        let mut rng = seeded_rng(0);
        let mut m = Model::new(s, &mut rng).unwrap();
        prepare_model(&mut m, &p, &mut rng).unwrap();
        let mut m = attach_adapters(m, 2, &mut rng).unwrap();
        let init = m.clone();
        let cfg = OptimConfig { kind, lr: 1e-2, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg, 2).unwrap();
        for batch in data.train.chunks(8) {
            train_step(&mut m, &p, batch, LossKind::Softmax, &mut opt).unwrap();
        }
        let policy = m.freeze_policy();
        let mut moved = 0;
        for ((name, a), (_, b)) in init.params.iter().zip(m.params.iter()) {
            if policy.is_trainable(name) {
                moved += usize::from(a != b);
            } else {
                assert_eq!(a.data(), b.data(), "{name} changed");
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn checkpoints_round_trip() {
    let p = PromptSpec::new(Strategy::DvpMulti, 2);
    let m = model_with(ModelKind::EncoderDecoder, &p, 12);
    let m = attach_adapters(m, 4, &mut seeded_rng(2)).unwrap();
    let bytes = checkpoint::encode(&m).unwrap();
    assert_eq!(&bytes[..4], checkpoint::MAGIC);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(checkpoint::encode(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dvpm");
    checkpoint::save(&m, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), m);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = model_with(ModelKind::Encoder, &PromptSpec::new(Strategy::DvpSingle, 1), 0);
    let bytes = checkpoint::encode(&m).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).unwrap_err().to_string().contains("magic"));
    let err = checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
    assert!(err.contains("byte"), "{err}");
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(checkpoint::decode(&version).is_err());
}
