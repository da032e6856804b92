use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use thoughtlab::eval::{generate, InferenceMode, OutputSampling};
use thoughtlab_bench::{text_tokens, toy_model};

fn first_token(c: &mut Criterion) {
    let model = toy_model(512);
    let prefix = text_tokens(256);
    let mut group = c.benchmark_group("ttft_256");
    group.sample_size(10);
    for mode in [
        InferenceMode::Ntp,
        InferenceMode::thought(8, 4),
        InferenceMode::thought(12, 4),
        InferenceMode::thought(16, 8),
    ] {
        group.bench_function(mode.label(), |b| {
            b.iter(|| generate(&model, &mode, black_box(&prefix), 1, None, OutputSampling::Greedy).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, first_token);
criterion_main!(benches);
