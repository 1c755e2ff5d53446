//! Per-sample work (factor estimation, dense Fisher, a full K-FAC step) with
//! the rayon pool and with `par::with_sequential`. Without the `parallel`
//! feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kfaclab::harness::{initial_params, synthetic_dataset, DatasetSpec, InputDistribution};
use kfaclab::kfac::{estimate_factors, kfac_step, UpdateConfig};
use kfaclab::metrics::{exact_fisher, OutputMetric, OutputModel, Sample};
use kfaclab::nets::{ActivationKind, LayerSpec, NetworkSpec, ParamSet};
use kfaclab::par;

fn setup(layers: Vec<LayerSpec>, n: usize) -> (NetworkSpec, ParamSet, Vec<Sample>) {
    let spec = NetworkSpec::new(layers, OutputModel::Categorical { num_classes: 6 }).unwrap();
    let data = synthetic_dataset(
        &spec,
        &DatasetSpec {
            num_samples: n,
            distribution: InputDistribution::StandardNormal,
        },
        1,
    )
    .unwrap();
    let params = initial_params(&spec, 1, 3.0);
    (spec, params, data)
}

fn workloads() -> Vec<(&'static str, NetworkSpec, ParamSet, Vec<Sample>)> {
    let act = ActivationKind::Logistic;
    let (mlp, mp, md) = setup(
        vec![
            LayerSpec::dense(8, 12, act.clone()),
            LayerSpec::dense(12, 10, act.clone()),
            LayerSpec::dense(10, 6, act.clone()),
        ],
        512,
    );
    let (conv, cp, cd) = setup(
        vec![
            LayerSpec::conv2d(2, 3, 1, 5, 5, act.clone()),
            LayerSpec::conv2d(3, 2, 1, 5, 5, act.clone()),
            LayerSpec::dense(50, 6, act.clone()),
        ],
        256,
    );
    let (rnn, rp, rd) = setup(
        vec![LayerSpec::recurrent(3, 6, 5, act.clone()), LayerSpec::dense(6, 6, act)],
        512,
    );
    vec![("mlp", mlp, mp, md), ("conv", conv, cp, cd), ("rnn", rnn, rp, rd)]
}

fn run<R>(sequential: bool, f: impl FnOnce() -> R) -> R {
    if sequential {
        par::with_sequential(f)
    } else {
        f()
    }
}

fn bench(c: &mut Criterion) {
    let update = UpdateConfig::undamped(0.05);
    for (name, spec, params, data) in workloads() {
        let mut group = c.benchmark_group(name);
        group.sample_size(20);
        for (label, sequential) in [("parallel", false), ("sequential", true)] {
            group.bench_function(BenchmarkId::new("estimate_factors", label), |b| {
                b.iter(|| run(sequential, || estimate_factors(&spec, &params, &data, OutputMetric::Fisher).unwrap()))
            });
            group.bench_function(BenchmarkId::new("kfac_step", label), |b| {
                b.iter(|| run(sequential, || kfac_step(&spec, &params, &data, OutputMetric::Fisher, &update).unwrap()))
            });
            if name == "mlp" {
                group.bench_function(BenchmarkId::new("exact_fisher", label), |b| {
                    b.iter(|| run(sequential, || exact_fisher(&spec, &params, &data[..128]).unwrap()))
                });
            }
        }
        group.finish();
    }
}

criterion_group!(benches, bench);
criterion_main!(benches);
