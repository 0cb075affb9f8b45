use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dvp_core::prompt::{PromptSpec, Strategy};
use dvp_core::tasks::{evaluate, gen_synthetic, LossKind, SyntheticTaskSpec};
use dvp_core::train::{build_model, keep_used_generators, train_step, OptimConfig, Optimizer};
use dvp_core::transformer::{ModelKind, ModelSpec};

fn desk_spec() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Encoder,
        layers: 6,
        width: 64,
        heads: 4,
        ffn_mult: 4,
        vocab: 64,
        text_len: 8,
        num_classes: 8,
        visual_width: 32,
    }
}

fn bench_train_step(c: &mut Criterion) {
    let task = SyntheticTaskSpec { train_size: 32, val_size: 128, test_size: 1, ..Default::default() };
    let data = gen_synthetic(&task).unwrap();
    let mut group = c.benchmark_group("train_step b32");
    group.sample_size(20);
    for (strategy, layer) in [(Strategy::Common, 1), (Strategy::DvpSingle, 1), (Strategy::DvpSingle, 6)] {
        let prompt = PromptSpec::new(strategy, layer);
        let mut model = build_model(&desk_spec(), None, 0).unwrap();
        keep_used_generators(&mut model, &prompt);
        let mut opt = Optimizer::new(OptimConfig::default(), 0).unwrap();
        group.bench_with_input(BenchmarkId::new(strategy.name(), layer), &layer, |b, _| {
            b.iter(|| train_step(&mut model, &prompt, &data.train, LossKind::Softmax, &mut opt).unwrap())
        });
    }
    group.finish();

    let prompt = PromptSpec::new(Strategy::DvpSingle, 3);
    let mut model = build_model(&desk_spec(), None, 0).unwrap();
    keep_used_generators(&mut model, &prompt);
    c.bench_function("evaluate 128 examples", |b| {
        b.iter(|| evaluate(&model, &prompt, &data.val, 128, LossKind::Softmax).unwrap())
    });
}

criterion_group!(benches, bench_train_step);
criterion_main!(benches);
