use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tgate::{
    gate_tensor, CostKind, CostModel, Mode, OptimizerState, Padding, ShapeKind, TaskLoss, Tape, TrainConfig,
    TrainableGate,
};
use tgate_bench::{cnn_model, glyph_batch, random_tensor};

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, side) in [(1, 8, 28), (8, 16, 14), (16, 32, 7)] {
        let x = random_tensor(&[32, cin, side, side], 1);
        let k = random_tensor(&[cout, cin, 3, 3], 2);
        group.bench_function(BenchmarkId::new("fwd_bwd", format!("{cin}x{cout}@{side}")), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
                let y = tape.conv2d(xv, kv, 2, Padding::Same).unwrap();
                let s = tape.sum(y).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn gates(c: &mut Criterion) {
    let w = random_tensor(&[4096], 3);
    let mut group = c.benchmark_group("gate_tensor");
    for shape in ShapeKind::ALL {
        let gate = TrainableGate::new(100_000, shape).unwrap();
        group.bench_function(shape.as_str(), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let wv = tape.leaf(w.clone());
                let tg = gate_tensor(&mut tape, wv, gate).unwrap();
                let s = tape.sum(tg).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let batch = glyph_batch(32, 4);
    let mut cfg = TrainConfig::new(Mode::Joint, TaskLoss::CrossEntropy, CostKind::Flops);
    cfg.batch_size = 32;
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for mode in [Mode::Joint, Mode::SelectionOnly] {
        cfg.mode = mode;
        let base = cnn_model(5);
        let cost = CostModel::new(&base, cfg.cost_kind).unwrap();
        group.bench_function(format!("{mode:?}"), |b| {
            let mut model = base.clone();
            let mut opt = OptimizerState::new(cfg.optimizer, model.param_refs().len()).unwrap();
            let mut it = 0;
            b.iter(|| {
                black_box(tgate::train_step(&mut model, &batch, &mut opt, &cfg, Some(&cost), it).unwrap());
                it += 1;
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv2d, gates, train_step);
criterion_main!(benches);
