use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vcamba_bench::{clip, square_masks};
use vcamba_core::loss::total_loss;
use vcamba_core::model::{ModelConfig, Variant, Vcamba};
use vcamba_core::tensor::no_grad;

fn forward_backward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = Vcamba::new(cfg.clone(), Variant::Full, 0).unwrap();
    let x = clip(cfg.frames, cfg.height, cfg.width);
    let gt = square_masks(cfg.frames, cfg.height, cfg.width);
    let mut g = c.benchmark_group("vcamba default");
    g.sample_size(10);
    g.bench_function("forward", |b| b.iter(|| black_box(no_grad(|| model.forward(&x)).unwrap())));
    g.bench_function("forward+backward", |b| {
        b.iter(|| {
            let loss = total_loss(&model.forward(&x).unwrap().levels, &gt).unwrap();
            loss.backward().unwrap();
        })
    });
    g.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
