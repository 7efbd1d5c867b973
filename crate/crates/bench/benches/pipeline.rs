use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ssda_bench::fixture;
use ssda_core::network::{backward, predict, Sgd, Target};
use ssda_core::pseudolabel::{anchor_features, infer_pseudo, select};
use ssda_core::trainer::{minimax_step, momentum_update_labels, StepBatches};
use ssda_core::{ProbVec, TrainConfig};

fn network(c: &mut Criterion) {
    let (split, params) = fixture();
    let x = split.source[0].x.clone();
    c.bench_function("predict", |b| b.iter(|| predict(black_box(&x), &params).unwrap()));

    let xs: Vec<&[f64]> = split.source[..32].iter().map(|s| s.x.as_slice()).collect();
    let ys: Vec<usize> = split.source[..32].iter().map(|s| s.y).collect();
    let soft: Vec<ProbVec> = ys.iter().map(|&y| ProbVec::one_hot(5, y)).collect();
    c.bench_function("backward hard x32", |b| {
        b.iter(|| backward(black_box(&xs), Target::Hard(&ys), &params).unwrap())
    });
    c.bench_function("backward soft x32", |b| {
        b.iter(|| backward(black_box(&xs), Target::Soft(&soft), &params).unwrap())
    });
    c.bench_function("backward entropy x32", |b| {
        b.iter(|| backward(black_box(&xs), Target::Entropy, &params).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let (split, params) = fixture();
    let cfg = TrainConfig::default();
    let batches = StepBatches {
        labeled_x: split.source[..32].iter().map(|s| s.x.as_slice()).collect(),
        labeled_y: split.source[..32].iter().map(|s| s.y).collect(),
        pseudo_x: split.unlabeled_target[..32].iter().map(|s| s.x.as_slice()).collect(),
        pseudo_y: vec![ProbVec::uniform(5); 32],
        unlabeled_x: split.unlabeled_target[32..64].iter().map(|s| s.x.as_slice()).collect(),
    };
    c.bench_function("minimax step", |b| {
        let mut p = params.clone();
        let mut opt = Sgd::new(&p);
        b.iter(|| minimax_step(&mut p, &mut opt, black_box(&batches), 1e-4, &cfg).unwrap())
    });

    let fresh: Vec<ProbVec> = (0..95).map(|i| ProbVec::one_hot(5, i % 5)).collect();
    c.bench_function("label refresh x95", |b| {
        let mut live = vec![ProbVec::uniform(5); 95];
        b.iter(|| momentum_update_labels(&mut live, black_box(&fresh), 0.9).unwrap())
    });
}

fn selection(c: &mut Criterion) {
    let (split, params) = fixture();
    let anchors = anchor_features(&params, &split.labeled_target, 5).unwrap();
    let annotations = infer_pseudo(&params, &split.unlabeled_target).unwrap();
    let n_u = split.unlabeled_target.len();
    c.bench_function("infer pseudo labels x470", |b| {
        b.iter(|| infer_pseudo(&params, black_box(&split.unlabeled_target)).unwrap())
    });
    c.bench_function("select r_u=0.2", |b| {
        b.iter(|| select(black_box(annotations.clone()), &anchors, 0.2, n_u, 5).unwrap())
    });
}

criterion_group!(benches, network, training, selection);
criterion_main!(benches);
