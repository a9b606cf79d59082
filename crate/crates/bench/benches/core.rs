use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use reve_core::linalg::{
    compact_svd, kernel_complement_projection, Matrix, DEFAULT_RANK_TOLERANCE,
};
use reve_core::nn::{Activation, LayerSpec, Mode, Model, SgdMomentum};
use reve_core::reve::{reve_loss, total_objective, ReveConfig, ReveStep};
use reve_core::{Tape, Tensor};

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn model(input: usize, dim: usize, classes: usize) -> Model {
    let layers = [
        LayerSpec::Dense {
            units: 64,
            activation: Activation::Relu,
        },
        LayerSpec::Dense {
            units: dim,
            activation: Activation::Tanh,
        },
    ];
    Model::new(
        &[input],
        &layers,
        classes,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap()
}

fn bench_projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("projection");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (classes, dim) in [(2, 32), (10, 64), (10, 512)] {
        let w = Matrix::new(classes, dim, normal(&mut rng, classes * dim)).unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{classes}x{dim}")),
            &w,
            |b, w| {
                b.iter(|| {
                    kernel_complement_projection(
                        &compact_svd(black_box(w), DEFAULT_RANK_TOLERANCE).unwrap(),
                    )
                })
            },
        );
    }
    group.finish();
}

fn bench_reve_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = model(32, 32, 10);
    let h = Tensor::new([128, 32], normal(&mut rng, 128 * 32)).unwrap();
    let labels: Vec<usize> = (0..128).map(|i| i % 10).collect();
    let mut head = model.head.clone();
    let projection = head
        .refresh(DEFAULT_RANK_TOLERANCE)
        .unwrap()
        .projection
        .clone();
    let config = ReveConfig::default();
    c.bench_function("reve_loss forward+backward N=128 S=12 d=32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let loss = reve_loss(
                tape.constant(h.clone()),
                &labels,
                &bound,
                &projection,
                &config,
                None,
                &mut rng,
            )
            .unwrap();
            black_box(tape.backward(loss.omega).unwrap());
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = model(32, 32, 2);
    let x = Tensor::new([128, 32], normal(&mut rng, 128 * 32)).unwrap();
    let labels: Vec<usize> = (0..128).map(|i| i % 2).collect();
    let config = ReveConfig::default();
    let mut optimizer = SgdMomentum::new(0.01, 1.0, 0.9, 0.0);
    c.bench_function("train step blobs-sized batch", |b| {
        b.iter(|| {
            let projection = model
                .head
                .projection(1, config.rank_tolerance)
                .unwrap()
                .clone();
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let step = ReveStep {
                config: &config,
                projection: &projection,
                previous_q: None,
                rng: &mut rng,
            };
            let objective = total_objective(
                &model.encoder,
                &bound,
                tape.constant(x.clone()),
                &labels,
                Mode::Eval,
                Some(step),
            )
            .unwrap();
            let mut grads = tape.backward(objective.total).unwrap();
            optimizer
                .step(model.updates(&bound, &mut grads), 0)
                .unwrap();
            model.head.mark_updated();
        })
    });
}

criterion_group!(benches, bench_projection, bench_reve_loss, bench_train_step);
criterion_main!(benches);
