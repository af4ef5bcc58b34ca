use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use scenematch::assignment::{partial_assignment, EVAL_SINKHORN_ITERS, TRAIN_SINKHORN_ITERS};
use scenematch::synth::{generate_pair, SynthConfig};
use scenematch::training::{DataSource, TrainConfig, TrainState};
use scenematch::{Model, ModelConfig, Tape, Tensor};
use std::hint::black_box;

fn sinkhorn(c: &mut Criterion) {
    let scores = Tensor::from_vec(64, 64, (0..64 * 64).map(|k| ((k * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap();
    c.bench_function("sinkhorn_64x64_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let s = tape.param(scores.clone());
            let z = tape.param(Tensor::scalar(1.0));
            let lp = partial_assignment(&mut tape, s, z, TRAIN_SINKHORN_ITERS).unwrap();
            let total = tape.sum(lp).unwrap();
            black_box(tape.backward(total).unwrap());
        })
    });
}

fn inference(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let pair = generate_pair(&SynthConfig::default(), 1).unwrap();
    c.bench_function("predict_64x64", |b| {
        b.iter(|| black_box(model.predict(&pair.source, &pair.target, EVAL_SINKHORN_ITERS, 0.2).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let data = DataSource::Stream { config: SynthConfig::default(), seed: 0 };
    let state = TrainState::new(TrainConfig::default()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_batch_default", |b| {
        b.iter_batched(|| state.clone(), |mut s| black_box(s.train_step(&data).unwrap()), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, sinkhorn, inference, train_step);
criterion_main!(benches);
