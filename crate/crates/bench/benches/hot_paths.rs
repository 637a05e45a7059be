use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use svaclr_core::datagen::Generator;
use svaclr_core::loss::{affinity_tape, soft_info_nce_tape};
use svaclr_core::model::BoundMapping;
use svaclr_core::train::{NoObserver, Trainer};
use svaclr_core::{AudioFeaturizer, DatasetSpec, LossConfig, Rng, Split, Tape, Tensor, TrainConfig};

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let (a, b) = (random(&mut rng, 64, 128), random(&mut rng, 128, 128));
    c.bench_function("matmul 64x128x128 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, w) = (t.leaf(a.clone()), t.leaf(b.clone()));
            let y = t.matmul(x, w).unwrap();
            let s = t.sum_all(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn featurizer(c: &mut Criterion) {
    let f = AudioFeaturizer::new(512).unwrap();
    let mut rng = Rng::new(1);
    let samples: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
    c.bench_function("audio features 512", |bench| bench.iter(|| black_box(f.features(&samples).unwrap())));
}

fn soft_loss(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let views: Vec<Tensor> = (0..8).map(|_| random(&mut rng, 64, 32)).collect();
    let cfg = LossConfig::default();
    c.bench_function("soft infonce N=64 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let v: Vec<_> = views.iter().map(|x| t.leaf(x.clone())).collect();
            let z: Vec<_> = v[4..].iter().map(|&x| t.l2_normalize(x, 1).unwrap()).collect();
            let lam = affinity_tape(&mut t, &v[0..2], &v[2..4], &BoundMapping::identity()).unwrap();
            let loss = soft_info_nce_tape(&mut t, &z[0..2], &z[2..4], lam, &cfg).unwrap();
            black_box(t.backward(loss).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let spec = DatasetSpec {
        clips_per_class_train: 8,
        ..DatasetSpec::default()
    };
    let train = Generator::new(&spec).unwrap().dataset(Split::Train).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("one soft_infonce step, batch 64", |bench| {
        bench.iter(|| {
            let mut t = Trainer::new(&train, &cfg).unwrap();
            t.run(&train, &mut NoObserver).unwrap();
            black_box(t.into_model());
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, featurizer, soft_loss, train_step);
criterion_main!(benches);
