use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use fogline::analysis::{predict_move, steady_rates, RatioTable};
use fogline::fabric::compile;
use fogline::placement::{initial_placement, optimize};
use fogline::scenario::Scenario;
use fogline::sim::{run, SimConfig};
use std::hint::black_box;

fn r1() -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/r1/scenario.json");
    Scenario::load(path).unwrap()
}

fn optimizers(c: &mut Criterion) {
    let sc = r1();
    let ratios = RatioTable::default();
    let plan = compile(
        sc.spec.clone(),
        sc.topology.clone(),
        &initial_placement(&sc.spec, &sc.topology),
    )
    .unwrap();
    let rates = steady_rates(&sc.spec);

    c.bench_function("predict_move/r1", |b| {
        b.iter(|| predict_move(black_box(&plan), "parse", "edge3", &rates, &ratios).unwrap())
    });
    c.bench_function("optimize/r1", |b| {
        b.iter(|| optimize(sc.spec.clone(), sc.topology.clone(), &sc.optimizer, &ratios, None).unwrap())
    });

    let records: Vec<_> = sc.records().take_while(|(_, r)| r.timestamp_ms < 30_000).collect();
    let cfg = SimConfig::new(30.0, 1);
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("r1/30s", |b| {
        b.iter(|| run(&plan, records.iter().cloned(), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, optimizers);
criterion_main!(benches);
