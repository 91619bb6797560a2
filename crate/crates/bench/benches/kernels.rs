use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use klue::dku::RuleIndex;
use klue::model::{self, Variant};
use klue::train::{generate_task, train_model, TaskSpec};
use klue::Graph;
use klue_bench::{paper_rules, reference_model, uniform};

fn autodiff(c: &mut Criterion) {
    let mut group = c.benchmark_group("autodiff");
    for n in [32, 64, 128] {
        let a = uniform(n, n, 1);
        let b = uniform(n, n, 2);
        group.bench_with_input(BenchmarkId::new("matmul_tanh_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.param(a.clone());
                let y = g.param(b.clone());
                let m = g.matmul(x, y).unwrap();
                let t = g.tanh(m).unwrap();
                let s = g.sum(t).unwrap();
                g.backward(s).unwrap();
                black_box(g.grad(x).cloned())
            })
        });
    }
    group.finish();
}

fn dku(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    let x = uniform(64, 64, 3);
    let labels = uniform(64, 6, 4).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    for variant in [Variant::Baseline, Variant::V1, Variant::V2] {
        let (cfg, m, _, index) = reference_model(variant);
        let idx = variant.uses_dku().then_some(&index);
        group.bench_function(BenchmarkId::new("forward", variant), |bench| {
            bench.iter(|| black_box(m.predict(&x, idx).unwrap()))
        });
        group.bench_function(BenchmarkId::new("loss_backward", variant), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let bound = m.bind(&mut g, true);
                let xv = g.constant(x.clone());
                let out = model::forward(&mut g, &m, &bound, xv, idx).unwrap();
                let nodes =
                    model::total_loss(&mut g, &m, &bound, &out, &labels, idx, &cfg.loss, cfg.enable_sat).unwrap();
                g.backward(nodes.total).unwrap();
                black_box(g.grad(bound.class_w).cloned())
            })
        });
    }
    group.finish();
}

fn rules(c: &mut Criterion) {
    let mut group = c.benchmark_group("rulebase");
    group.bench_function("generate_T100_K20", |b| b.iter(|| black_box(paper_rules(7))));
    let rb = paper_rules(7);
    group.bench_function("index_T100_K20", |b| b.iter(|| black_box(RuleIndex::new(&rb, 20, 100).unwrap())));
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    let (mut cfg, _, rb, _) = reference_model(Variant::V1);
    cfg.task = TaskSpec {
        train_size: 1000,
        val_size: 200,
        shifted_size: 100,
        ..cfg.task
    };
    cfg.epochs = 1;
    let (_, train, val, _) = generate_task(&cfg.task).unwrap();
    group.bench_function("epoch_1000_samples_v1", |b| {
        b.iter(|| black_box(train_model(&cfg, &train, &[&val], &rb, |_| {}).unwrap().history.len()))
    });
    group.finish();
}

criterion_group!(benches, autodiff, dku, rules, training);
criterion_main!(benches);
