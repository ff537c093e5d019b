use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use tvae_bench::{bench_images, bench_model};
use tvae::encoder::rotate_kernel_stack;
use tvae::latent::{attention_softmax, gumbel_softmax_sample, kl_total, sample_joint};
use tvae::training::elbo_loss;

fn encode_forward(c: &mut Criterion) {
    let model = bench_model(28, 28, 16, 9);
    let images = bench_images(4, 28, 28);
    c.bench_function("encode_p4_c16_28x28_b4", |b| {
        b.iter(|| black_box(model.encoder.encode(black_box(&images)).unwrap()))
    });
}

fn elbo_forward(c: &mut Criterion) {
    let model = bench_model(28, 28, 16, 9);
    let images = bench_images(4, 28, 28);
    c.bench_function("elbo_loss_p4_c16_28x28_b4", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| black_box(elbo_loss(black_box(&images), &model, 0.5, &mut rng).unwrap()))
    });
}

fn latent_ops(c: &mut Criterion) {
    let model = bench_model(28, 28, 16, 9);
    let images = bench_images(2, 28, 28);
    let field = model.encoder.encode(&images).unwrap();
    c.bench_function("kl_total_p4_28x28_b2", |b| {
        b.iter(|| black_box(kl_total(black_box(&field), &model.prior).unwrap()))
    });
    c.bench_function("attention_softmax_p4_28x28_b2", |b| {
        b.iter(|| black_box(attention_softmax(black_box(&field.attn_logits)).unwrap()))
    });
    let q = attention_softmax(&field.attn_logits).unwrap();
    c.bench_function("gumbel_sample_p4_28x28_b2", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| black_box(gumbel_softmax_sample(black_box(&q), 0.5, &mut rng).unwrap()))
    });
    c.bench_function("sample_joint_p4_28x28_b2", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| {
            black_box(sample_joint(black_box(&field), &model.grid, &model.prior, 0.5, &mut rng).unwrap())
        })
    });
}

fn decoder_render(c: &mut Criterion) {
    let model = bench_model(28, 28, 16, 9);
    let z = ndarray::Array2::from_shape_fn((4, 2), |(i, j)| 0.1 * (i + j) as f64);
    let theta = ndarray::Array1::from_shape_fn(4, |i| 0.3 * i as f64);
    let t = ndarray::Array2::zeros((4, 2));
    c.bench_function("render_28x28_b4", |b| {
        b.iter(|| black_box(model.render(&z, &theta, &t, 28, 28).unwrap()))
    });
}

fn kernel_rotation(c: &mut Criterion) {
    let kernels = Array3::from_shape_fn((16, 9, 9), |(n, i, j)| ((n + i * j) % 7) as f64);
    c.bench_function("rotate_kernel_stack_16x9x9_r8", |b| {
        b.iter(|| black_box(rotate_kernel_stack(black_box(&kernels), 8)))
    });
}

fn detection(c: &mut Criterion) {
    let model = bench_model(20, 20, 8, 7);
    let image: Array4<f64> = bench_images(1, 60, 60);
    c.bench_function("detect_objects_60x60", |b| {
        b.iter(|| black_box(tvae::eval::detect_objects(&model, black_box(&image), None, None).unwrap()))
    });
}

criterion_group!(
    benches,
    encode_forward,
    elbo_forward,
    latent_ops,
    decoder_render,
    kernel_rotation,
    detection
);
criterion_main!(benches);
