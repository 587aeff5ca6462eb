use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use pptp_bench::{score_fixture, uniform};
use pptp_core::data::{load_dataset, DatasetSpec};
use pptp_core::mia::{roc_auc, statistic, AttackKind};
use pptp_core::model_zoo::{build_model, ArchitectureSpec, TapSelection};
use pptp_core::profiler::{feature_distance, ks_statistic};
use pptp_core::tensor::sgemm;
use pptp_core::training::{ObjectiveSpec, TrainConfig, Trainer};
use pptp_core::data::AugmentationPolicy;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("sgemm");
    for &n in &[64usize, 256, 512] {
        let a = uniform(n * n, 1);
        let b = uniform(n * n, 2);
        let mut out = vec![0.0f32; n * n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| sgemm(n, n, n, 1.0, &a, false, &b, false, 0.0, black_box(&mut out)))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let pools = load_dataset(&DatasetSpec {
        train_size: 256,
        eval_size: 16,
        ..DatasetSpec::default()
    })
    .unwrap();
    let (mut model, _) = build_model(&ArchitectureSpec::desk_residual(0)).unwrap();
    let idx: Vec<usize> = (0..128).collect();
    let batch = pools.train.batch(&idx);
    c.bench_function("forward_taps_128", |b| {
        b.iter(|| model.forward_with_taps(black_box(&batch), TapSelection::AllBlocks).unwrap())
    });
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("epoch_256", |b| {
        b.iter(|| {
            let (mut m, _) = build_model(&ArchitectureSpec::desk_residual(0)).unwrap();
            let cfg = TrainConfig::desk(1, 0, ObjectiveSpec::ce(), AugmentationPolicy::disabled());
            Trainer::new(cfg).run(&mut m, &pools.train, &(0..256).collect::<Vec<_>>()).unwrap()
        })
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let p = uniform(4096, 3);
    let q = uniform(4096, 4);
    c.bench_function("feature_distance_4096", |b| b.iter(|| feature_distance(black_box(&p), black_box(&q)).unwrap()));
    let a: Vec<f64> = uniform(2500, 5).into_iter().map(f64::from).collect();
    let d: Vec<f64> = uniform(2500, 6).into_iter().map(f64::from).collect();
    c.bench_function("ks_2500", |b| b.iter(|| ks_statistic(black_box(&a), black_box(&d)).unwrap()));
    let scores = score_fixture(5000, 10, 7);
    let stats: Vec<f64> = scores.iter().map(|s| statistic(AttackKind::Mentropy, s)).collect();
    let flags: Vec<bool> = scores.iter().map(|s| s.is_member).collect();
    c.bench_function("roc_auc_5000", |b| b.iter(|| roc_auc(black_box(&stats), black_box(&flags)).unwrap()));
}

criterion_group!(benches, gemm, forward, metrics);
criterion_main!(benches);
