//! Sequential vs rayon execution of the two data-parallel hot spots: the
//! per-(domain, label) clustering and a small grid of pipeline cells.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use osdg_core::par::Exec;
use osdg_core::partition::group_and_cluster;
use osdg_core::pipeline::{
    build_dataset, noisy_split, run_grid, run_stage1, PipelineConfig, Variant,
};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn clustering(c: &mut Criterion) {
    let cfg = PipelineConfig::default();
    let (spec, data) = build_dataset(&cfg, 0).unwrap();
    let split = noisy_split(&cfg, &spec, &data, 0, 0).unwrap();
    let (_, store) = run_stage1(&cfg, &split, 0).unwrap();
    let mut group = c.benchmark_group("group_and_cluster");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| group_and_cluster(&store, &split.sources, exec).unwrap())
        });
    }
    group.finish();
}

fn cells(c: &mut Criterion) {
    let mut cfg = PipelineConfig::default();
    cfg.meta.steps = 50;
    cfg.meta.schedule = osdg_core::numeric::LrSchedule::Constant { lr: 0.05 };
    let mut group = c.benchmark_group("run_grid");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_grid(&cfg, &[0], &[0, 1, 2, 3], &[Variant::NoDccrfm], exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, clustering, cells);
criterion_main!(benches);
