use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use thoughtlab::rl::{sequence_loss_and_grads, RewardSource};
use thoughtlab::tensor::Visibility;
use thoughtlab::thought::{generate_thoughts, scorable_positions, Decoding, ThoughtConfig};
use thoughtlab_bench::{text_tokens, toy_model};

fn forward(c: &mut Criterion) {
    let model = toy_model(512);
    for len in [64, 256] {
        let tokens = text_tokens(len);
        let pos: Vec<usize> = (0..len).collect();
        let vis = Visibility::causal(len);
        c.bench_function(&format!("causal_forward_{len}"), |b| {
            b.iter(|| model.forward(black_box(&tokens), &vis, &pos).unwrap())
        });
    }
}

fn thoughts(c: &mut Criterion) {
    let model = toy_model(512);
    let tokens = text_tokens(16);
    for (n, m) in [(8, 4), (16, 8)] {
        let cfg = ThoughtConfig::new(n, m);
        let pos = scorable_positions(16, m);
        c.bench_function(&format!("packed_thoughts_{n}_{m}"), |b| {
            b.iter(|| generate_thoughts(&model, black_box(&tokens), &pos, &cfg, Decoding::Sample { seed: 1 }).unwrap())
        });
        let batch = generate_thoughts(&model, &tokens, &pos, &cfg, Decoding::Sample { seed: 1 }).unwrap();
        c.bench_function(&format!("loss_and_grads_{n}_{m}"), |b| {
            b.iter(|| {
                sequence_loss_and_grads(&model, &tokens, &batch, &cfg, 1.0, RewardSource::Computed { clip: None }).unwrap()
            })
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, thoughts
}
criterion_main!(benches);
