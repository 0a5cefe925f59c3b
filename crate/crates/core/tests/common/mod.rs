#![allow(dead_code)]

use std::sync::Arc;

use fogline::analysis::{cost_of_usage, fits_edges, modeled_usage, steady_rates, RatioTable};
use fogline::fabric::{compile, Placement};
use fogline::logical::{ComponentDecl, ComponentKind, LogicalSpec, SinkDecl, SinkKind, SourceDecl};
use fogline::money::MicroUsd;
use fogline::placement::initial_placement;
use fogline::scenario::Scenario;
use fogline::topology::{parse_topology, Topology};
use fogline::workload::{SensorModel, SourceWorkload, WorkloadSpec};
use rand::Rng;

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .join("scenario.json")
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(scenario_path(name)).expect("reference scenario loads")
}

/// A random chain-ish DAG of `n` components fed by one edge source, with
/// every dangling component wired to a cloud storage sink.
pub fn random_spec(rng: &mut impl Rng, n: usize) -> LogicalSpec {
    let kinds = [
        ComponentKind::StreamOp,
        ComponentKind::MlScorer,
        ComponentKind::Aggregator,
    ];
    let mut components = Vec::new();
    let mut edges = Vec::new();
    let mut has_successor = vec![false; n];
    for i in 0..n {
        let id = format!("c{i}");
        let upstream = if i == 0 { None } else { Some(rng.gen_range(0..i)) };
        match upstream {
            None => edges.push(("src".to_string(), id.clone())),
            Some(u) => {
                has_successor[u] = true;
                edges.push((format!("c{u}"), id.clone()));
            }
        }
        components.push(ComponentDecl {
            id,
            kind: kinds[rng.gen_range(0..kinds.len())],
            cpu_units_per_msg: rng.gen_range(0.0005..0.01),
            mem_mb: rng.gen_range(16.0..256.0f64).round(),
            selectivity: [0.1, 0.25, 0.5, 1.0][rng.gen_range(0..4)],
            out_bytes_per_msg: rng.gen_range(100..1500),
            pinned_site: None,
        });
    }
    for (i, succ) in has_successor.iter().enumerate() {
        if !succ {
            edges.push((format!("c{i}"), "store".to_string()));
        }
    }
    LogicalSpec {
        name: "random".into(),
        sources: vec![SourceDecl {
            id: "src".into(),
            selector: "field/#".into(),
            site_id: "edge".into(),
            rate: rng.gen_range(20..200) as f64,
            bytes_per_msg: rng.gen_range(200..2000),
        }],
        components,
        sinks: vec![SinkDecl {
            id: "store".into(),
            kind: SinkKind::Storage,
            site_id: "cloud".into(),
        }],
        edges,
    }
}

/// One edge plus the cloud, with randomized capacity and prices.
pub fn random_topology(rng: &mut impl Rng) -> Topology {
    let speed = [0.5, 1.0, 1.5][rng.gen_range(0..3)];
    let text = serde_json::json!({
        "sites": [
            {"id": "edge", "site_type": "edge", "cpu_units": rng.gen_range(0.2..2.0f64),
             "mem_mb": 1024, "speed_factor": speed},
            {"id": "cloud", "site_type": "cloud", "cpu_units": 1e6, "mem_mb": 1e6, "speed_factor": 1.0,
             "pricing": {
                "per_cpu_unit_second": rng.gen_range(1e-5..1e-4f64),
                "per_million_invocations": rng.gen_range(0.0..0.5f64),
                "per_gb_ingress": rng.gen_range(0.0..0.05f64),
                "per_gb_storage_write": rng.gen_range(0.0..0.05f64)
             }}
        ],
        "links": [
            {"from": "edge", "to": "cloud", "bandwidth_schedule": [[0, 1e9]],
             "per_gb_cost": rng.gen_range(0.05..2.0f64)}
        ]
    })
    .to_string();
    parse_topology(&text).expect("generated topology is valid")
}

/// The cheapest feasible modeled cost over every assignment of movable
/// components to sites.
pub fn exhaustive_optimum(spec: &Arc<LogicalSpec>, topology: &Arc<Topology>, ratios: &RatioTable) -> MicroUsd {
    let rates = steady_rates(spec);
    let sites: Vec<String> = topology.sites.iter().map(|s| s.id.clone()).collect();
    let movable: Vec<String> = spec.components.iter().map(|c| c.id.clone()).collect();
    let base = initial_placement(spec, topology);
    let combos = sites.len().pow(movable.len() as u32);
    let mut best: Option<MicroUsd> = None;
    for mut k in 0..combos {
        let mut p: Placement = base.clone();
        for c in &movable {
            p.set(c.clone(), sites[k % sites.len()].clone());
            k /= sites.len();
        }
        let Ok(plan) = compile(spec.clone(), topology.clone(), &p) else {
            continue;
        };
        let usage = modeled_usage(&plan, &rates, ratios);
        if !fits_edges(topology, &usage) {
            continue;
        }
        let total = cost_of_usage(topology, &usage).total;
        best = Some(best.map_or(total, |b| b.min(total)));
    }
    best.expect("the all-cloud placement is always feasible")
}

/// Random-walk sensors at the spec's source rate, for `duration_s`.
pub fn workload_for(spec: &LogicalSpec, duration_s: f64, seed: u64) -> WorkloadSpec {
    let sources = spec
        .sources
        .iter()
        .map(|s| {
            let sensors = 10u32;
            SourceWorkload {
                source_id: s.id.clone(),
                sensors,
                model: SensorModel::RandomWalk {
                    step_sd: 0.3,
                    start: 15.0,
                },
                rate: s.rate / sensors as f64,
            }
        })
        .collect();
    WorkloadSpec {
        sources,
        duration_s,
        seed,
    }
}
