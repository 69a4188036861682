use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use spg_core::cgan::{discriminator_step, generator_step, CganConfig, Discriminator, Generator};
use spg_core::classify::{logits_fixed, shared_logits};
use spg_core::optim::{AdamW, AdamWConfig};
use spg_core::world::{generate_benchmark, BenchmarkSpec, FrozenWorld};
use spg_core::{Tape, Tensor};

fn world() -> FrozenWorld {
    generate_benchmark(&BenchmarkSpec {
        token_fit_steps: 20,
        ..Default::default()
    })
    .unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let a = Tensor::full(&[32, 80], 0.1);
    let b = Tensor::full(&[80, 128], 0.2);
    c.bench_function("matmul_fwd_bwd_32x80x128", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let av = t.param(&a);
            let bv = t.param(&b);
            let y = t.matmul(av, bv).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn bench_stage_one(c: &mut Criterion) {
    let w = world();
    let rows: Vec<usize> = (0..32).collect();
    let x = w.gather(&rows);
    let labels = w.labels_of(&rows);
    let prompt = w.manual_prompt().flat().unwrap();
    c.bench_function("stage_one_batch_loss_and_grad", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let enc = w.encoder.bind(&mut t);
            let tokens = t.constant(w.tokens.clone());
            let p = t.param(&prompt);
            let xv = t.constant(x.clone());
            let logits = shared_logits(&mut t, &enc, tokens, p, xv, 0.01).unwrap();
            let loss = t.softmax_cross_entropy(logits, &labels).unwrap();
            black_box(t.backward(loss).unwrap());
        })
    });
    let all: Vec<usize> = (0..w.num_samples()).collect();
    let x_all = w.gather(&all);
    c.bench_function("classify_all_samples_fixed_prompt", |bench| {
        bench.iter(|| black_box(logits_fixed(&w, &prompt, &x_all, 0.01).unwrap()))
    });
}

fn bench_gan_iteration(c: &mut Criterion) {
    let w = world();
    let cfg = CganConfig::default();
    let mut g = Generator::init(&w, &cfg, None, 0);
    let mut d = Discriminator::init(&w, &cfg, 0);
    let rows: Vec<usize> = (0..cfg.batch_size).collect();
    let x = w.gather(&rows);
    let real = Tensor::full(&[rows.len(), w.context_len() * w.dim()], 0.05);
    let z = Tensor::full(&[rows.len(), cfg.z_dim], 0.3);
    let (mut od, mut og) = (AdamW::new(AdamWConfig::default()), AdamW::new(AdamWConfig::default()));
    c.bench_function("cgan_iteration_batch32", |bench| {
        bench.iter(|| {
            let mut norms = Vec::new();
            let fake = g.generate(&z, &x).unwrap();
            discriminator_step(&mut d, &real, &x, &fake, &x, &mut od, &cfg, &mut norms).unwrap();
            black_box(generator_step(&mut g, &d, &z, &x, &mut og, &cfg, &mut norms).unwrap());
        })
    });
}

criterion_group!(benches, bench_matmul, bench_stage_one, bench_gan_iteration);
criterion_main!(benches);
