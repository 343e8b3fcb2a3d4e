use std::time::Duration;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxsep::diffcore::kernels::{conv1d_forward, depthwise_forward, ConvGeom};
use ctxsep::diffcore::Graph;
use ctxsep::metrics::evaluate_records;
use ctxsep::model::{init_params, Components, Model, ModelConfig, Separator};
use ctxsep::signal::synth_toy_record;
use ctxsep::trainer::{mock_utterance, separation_loss, LossConfig};
use ctxsep::Exec;

const POLICIES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn ramp(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| ((i * 7919) % 101) as f32 / 101.0 - 0.5)
        .collect()
}

fn kernels(c: &mut Criterion) {
    let conv = ConvGeom {
        c_in: 64,
        c_out: 128,
        kernel: 1,
        t_in: 999,
        stride: 1,
        dilation: 1,
        pad: 0,
    };
    let dw = ConvGeom {
        c_in: 128,
        c_out: 128,
        kernel: 3,
        t_in: 999,
        stride: 1,
        dilation: 4,
        pad: 4,
    };
    let x = ramp(128 * 999);
    let w = ramp(128 * 64);
    let wd = ramp(128 * 3);
    let mut group = c.benchmark_group("kernels");
    for (name, exec) in POLICIES {
        group.bench_with_input(
            BenchmarkId::new("pointwise_64x128", name),
            &exec,
            |b, &e| b.iter(|| conv1d_forward(black_box(&x[..64 * 999]), &w, &conv, e)),
        );
        group.bench_with_input(BenchmarkId::new("depthwise_128", name), &exec, |b, &e| {
            b.iter(|| depthwise_forward(black_box(&x), &wd, &dw, e))
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let cfg = ModelConfig::small();
    let params = init_params(&cfg, &Components::separation(), 0).unwrap();
    let record = synth_toy_record(0, 16_000, 5).unwrap();
    let utt = mock_utterance(0, record, &[], &cfg, &LossConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("training_step");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(20));
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::new("separation_1s", name), &exec, |b, &e| {
            b.iter(|| {
                let mut store = params.clone();
                let mut g = Graph::with_exec(e);
                let model = Model::new(&cfg, &store);
                let loss = separation_loss(&mut g, &model, &utt).unwrap();
                g.backward(loss.total, &mut store).unwrap();
                store
            })
        });
    }
    group.finish();
}

fn batch_eval(c: &mut Criterion) {
    let cfg = ModelConfig::small();
    let params = init_params(&cfg, &Components::separation(), 0).unwrap();
    let records: Vec<_> = (0..4)
        .map(|i| synth_toy_record(i, 8_000, 6).unwrap())
        .collect();
    let mut group = c.benchmark_group("batch_eval");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(20));
    for (name, exec) in POLICIES {
        let mut sep = Separator::new(cfg.clone(), params.clone()).unwrap();
        sep.exec = Exec::Sequential;
        group.bench_with_input(BenchmarkId::new("4x0.5s", name), &exec, |b, &e| {
            b.iter(|| evaluate_records(&sep, black_box(&records), e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, training_step, batch_eval);
criterion_main!(benches);
