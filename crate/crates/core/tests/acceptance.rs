//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any of them fails.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fogline::analysis::{fits_edges, modeled_usage, observed_cost, predict_move, steady_rates, RatioTable};
use fogline::codec::{decode, encode, Batch, CodecId};
use fogline::fabric::{compile, PhysicalPlan, Placement};
use fogline::logical::LogicalSpec;
use fogline::metrics::MetricsSeries;
use fogline::placement::{initial_placement, optimize, OptimizerConfig};
use fogline::report::{comm_csv, comm_series, replay_link, CommRow};
use fogline::scenario::{sample_of, Scenario};
use fogline::sim::{run, SimConfig};
use fogline::topology::Topology;
use fogline::workload::{generate, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const A1_MIN_STEP_REDUCTION: f64 = 0.30;
const A1_MAX_RUNTIME: Duration = Duration::from_secs(10);
const A2_MAX_INITIAL_UTIL: f64 = 0.15;
const A2_MIN_FINAL_UTIL: f64 = 0.70;
const A2_MAX_RUNTIME: Duration = Duration::from_secs(10);
const A3_CASES: usize = 50;
const A3_MAX_COMPONENTS: usize = 5;
const A3_MAX_RATIO: f64 = 1.10;
const A3_MAX_RUNTIME: Duration = Duration::from_secs(60);
const A4_CASES: usize = 30;
const A4_RUN_S: f64 = 60.0;
const A4_MAX_ERROR_FRACTION: f64 = 0.05;
const A4_MAX_RUNTIME: Duration = Duration::from_secs(120);
const A6_MAX_OVERSHOOT: f64 = 2.5;
const A7_MAX_DRAIN_S: f64 = 120.0;
const A7_MIN_PEAK_OVER_STEADY: f64 = 1.10;
const A7_LEVEL_BAND: f64 = 0.10;
const A7_LEVEL_SPAN_S: usize = 30;
const A9_BATCHES: usize = 10_000;
const A9_MAX_RUNTIME: Duration = Duration::from_secs(60);

/// SHA-256 of the artifacts each reference scenario must reproduce.
const GOLDEN: &[(&str, &str)] = &[
    (
        "r1/figure2.csv",
        "b8d3b4d4c3b58fa3910f3705ecc56f81c95ef14acfb50d1859fb46c4db03acf9",
    ),
    (
        "r1/figure3.csv",
        "3692238b458b41048c6c5c9c73d506785c176e7e0cdcdc97b869b2f6ccb64e34",
    ),
    (
        "r1/metrics.csv",
        "88849a293ccafc8b35d0f24e45f045a517815d758abf1cadfab605d78cec5a58",
    ),
    (
        "r1/moves.csv",
        "b56f5748fe009eb3349b1dd6b80f8def7aad0c2b43f1b6ece0f0ac92bfcf6aa6",
    ),
    (
        "r2/figure3.csv",
        "30626eff202aca5d08ec2e8b00137c856d4a00ba8503226f7fa0846afc534297",
    ),
    (
        "r2/metrics.csv",
        "a113b2fa1d3d6b19c397a277f0fff0398861fb5fd13c93d6212cba6dd60367bc",
    ),
];

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed <= limit,
        format!("{detail}; {:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn plan_for(sc: &Scenario, placement: &Placement) -> PhysicalPlan {
    compile(sc.spec.clone(), sc.topology.clone(), placement).expect("reference placement compiles")
}

fn simulate(sc: &Scenario, plan: &PhysicalPlan, window_s: Option<f64>) -> MetricsSeries {
    let mut cfg = sc.sim.clone();
    if let Some(w) = window_s {
        cfg.metrics_window_s = w;
    }
    run(plan, sc.records(), &cfg).expect("reference scenario simulates")
}

fn r1_optimized(sc: &Scenario) -> fogline::placement::OptimizeResult {
    optimize(
        sc.spec.clone(),
        sc.topology.clone(),
        &sc.optimizer,
        &sc.ratio_table(),
        None,
    )
    .expect("R1 optimizes")
}

fn a1(r1: &Scenario) -> Outcome {
    let start = Instant::now();
    let r = r1_optimized(r1);
    let elapsed = start.elapsed();
    if r.moves.len() < 2 {
        return Err(format!("only {} moves", r.moves.len()));
    }
    let mut prev = r.initial_total;
    let mut steps = Vec::new();
    for m in &r.moves[..2] {
        steps.push(1.0 - m.total.micros() as f64 / prev.micros() as f64);
        prev = m.total;
    }
    let ok = steps.iter().all(|&s| s >= A1_MIN_STEP_REDUCTION);
    let detail = format!(
        "iteration reductions {:.1}% and {:.1}% (min {:.0}%)",
        steps[0] * 100.0,
        steps[1] * 100.0,
        A1_MIN_STEP_REDUCTION * 100.0
    );
    check(ok, detail).and_then(|d| within(elapsed, A1_MAX_RUNTIME, d))
}

fn a2(r1: &Scenario) -> Outcome {
    let start = Instant::now();
    let r = r1_optimized(r1);
    let elapsed = start.elapsed();
    let initial = r.initial_edge_util;
    let last = r.moves.last().map_or(initial, |m| m.aggregate_edge_util);
    let detail = format!(
        "edge cpu utilization {initial:.3} -> {last:.3} (need <= {A2_MAX_INITIAL_UTIL} then >= {A2_MIN_FINAL_UTIL})"
    );
    check(initial <= A2_MAX_INITIAL_UTIL && last >= A2_MIN_FINAL_UTIL, detail)
        .and_then(|d| within(elapsed, A2_MAX_RUNTIME, d))
}

fn a3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    let ratios = RatioTable::default();
    let mut worst = 0.0f64;
    let mut worst_case = 0;
    let mut over = Vec::new();
    for case in 0..A3_CASES {
        let n = rng.gen_range(1..=A3_MAX_COMPONENTS);
        let spec = Arc::new(common::random_spec(&mut rng, n));
        let topo = Arc::new(common::random_topology(&mut rng));
        let greedy = optimize(spec.clone(), topo.clone(), &OptimizerConfig::default(), &ratios, None)
            .map_err(|e| format!("case {case}: {e}"))?;
        let got = greedy.moves.last().map_or(greedy.initial_total, |m| m.total);
        let best = common::exhaustive_optimum(&spec, &topo, &ratios);
        let ratio = if best.micros() > 0 {
            got.micros() as f64 / best.micros() as f64
        } else if got.micros() == 0 {
            1.0
        } else {
            f64::INFINITY
        };
        if ratio > A3_MAX_RATIO {
            over.push(case);
        }
        if ratio > worst {
            worst = ratio;
            worst_case = case;
        }
    }
    let detail = format!(
        "worst greedy/optimal {worst:.4} (case {worst_case}); {} of {A3_CASES} cases over {A3_MAX_RATIO}: {over:?}",
        over.len()
    );
    check(worst <= A3_MAX_RATIO, detail).and_then(|d| within(start.elapsed(), A3_MAX_RUNTIME, d))
}

fn random_feasible_plan(rng: &mut ChaCha8Rng, spec: &Arc<LogicalSpec>, topo: &Arc<Topology>) -> PhysicalPlan {
    let sites: Vec<String> = topo.sites.iter().map(|s| s.id.clone()).collect();
    loop {
        let mut p = initial_placement(spec, topo);
        for c in &spec.components {
            p.set(c.id.clone(), sites[rng.gen_range(0..sites.len())].clone());
        }
        if let Ok(plan) = compile(spec.clone(), topo.clone(), &p) {
            if fits_edges(topo, &modeled_usage(&plan, &steady_rates(spec), &RatioTable::default())) {
                return plan;
            }
        }
    }
}

fn a4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < A4_CASES {
        attempts += 1;
        if attempts > 50 * A4_CASES {
            return Err(format!("found only {done} legal moves"));
        }
        let n = rng.gen_range(2..=5);
        let spec = Arc::new(common::random_spec(&mut rng, n));
        let topo = Arc::new(common::random_topology(&mut rng));
        let before = random_feasible_plan(&mut rng, &spec, &topo);
        let c = spec.components[rng.gen_range(0..n)].id.clone();
        let here = before.site_of(&c).unwrap().to_string();
        let target = topo.sites.iter().map(|s| s.id.clone()).find(|s| *s != here).unwrap();
        let Ok(after) = before.apply_move(&c, &target) else {
            continue;
        };

        let seed = rng.gen();
        let cfg = SimConfig::new(A4_RUN_S, seed);
        let workload = common::workload_for(&spec, A4_RUN_S, seed);
        let series_before = run(&before, generate(&workload).unwrap(), &cfg).map_err(|e| e.to_string())?;
        let series_after = run(&after, generate(&workload).unwrap(), &cfg).map_err(|e| e.to_string())?;

        let sample = sample_of(generate(&workload).unwrap());
        let mut ratios = RatioTable::default().with_sample(&spec, &sample, cfg.tick_ms);
        ratios.calibrate(&before, &series_before.totals);
        let predicted = predict_move(&before, &c, &target, &steady_rates(&spec), &ratios).map_err(|e| e.to_string())?;
        if !predicted.feasible {
            continue;
        }
        let cost_before = observed_cost(&before, &series_before).map_err(|e| e.to_string())?;
        let cost_after = observed_cost(&after, &series_after).map_err(|e| e.to_string())?;
        let realized = cost_after.total - cost_before.total;
        let total = cost_before.total.max(cost_after.total).micros().max(1) as f64;
        let err = (predicted.delta - realized).abs().micros() as f64 / total;
        worst = worst.max(err);
        done += 1;
    }
    let detail = format!(
        "worst |predicted - realized| = {:.2}% of total over {A4_CASES} moves (max {:.0}%)",
        worst * 100.0,
        A4_MAX_ERROR_FRACTION * 100.0
    );
    check(worst <= A4_MAX_ERROR_FRACTION, detail).and_then(|d| within(start.elapsed(), A4_MAX_RUNTIME, d))
}

fn r2_rows(r2: &Scenario) -> Vec<CommRow> {
    let plan = plan_for(r2, &r2.placement_or_initial());
    let series = simulate(r2, &plan, Some(1.0));
    comm_series(&plan, &series, replay_link(&plan).unwrap())
}

fn schedule_steps(rows: &[CommRow]) -> Vec<usize> {
    (1..rows.len())
        .filter(|&i| rows[i].cap_bits_s != rows[i - 1].cap_bits_s)
        .collect()
}

fn a5(rows: &[CommRow]) -> Outcome {
    let steps = schedule_steps(rows);
    let Some(&drop) = steps.iter().find(|&&i| rows[i].cap_bits_s < rows[i - 1].cap_bits_s) else {
        return Err("no cap drop in the schedule".into());
    };
    let decision = |r: &CommRow| (r.codec.clone(), r.batch_window_s);
    let changed_at = (drop..rows.len()).find(|&i| decision(&rows[i]) != decision(&rows[drop - 1]));
    let steady_before = rows[..drop]
        .windows(2)
        .skip(5)
        .all(|w| decision(&w[0]) == decision(&w[1]));
    let detail = match changed_at {
        Some(i) => format!(
            "cap drops at t={}s, decision {}/{}s -> {}/{}s at t={}s",
            rows[drop].t_s,
            rows[drop - 1].codec,
            rows[drop - 1].batch_window_s,
            rows[i].codec,
            rows[i].batch_window_s,
            rows[i].t_s
        ),
        None => "decision never changed".into(),
    };
    check(changed_at == Some(drop) && steady_before, detail)
}

fn congestion_range(rows: &[CommRow]) -> Option<(usize, usize)> {
    let steps = schedule_steps(rows);
    let drop = *steps.iter().find(|&&i| rows[i].cap_bits_s < rows[i - 1].cap_bits_s)?;
    let restore = steps.iter().copied().find(|&i| i > drop).unwrap_or(rows.len());
    Some((drop, restore))
}

fn a6(rows: &[CommRow]) -> Outcome {
    let Some((drop, restore)) = congestion_range(rows) else {
        return Err("no congestion phase".into());
    };
    let worst = rows[drop..restore]
        .iter()
        .map(|r| r.sent_bits_s / r.cap_bits_s)
        .fold(0.0f64, f64::max);
    check(
        worst <= A6_MAX_OVERSHOOT,
        format!("max per-second overshoot {worst:.3}x cap (max {A6_MAX_OVERSHOOT}x)"),
    )
}

fn a7(rows: &[CommRow]) -> Outcome {
    let Some((drop, restore)) = congestion_range(rows) else {
        return Err("no congestion phase".into());
    };
    if restore >= rows.len() {
        return Err("cap never restored".into());
    }
    let pre = &rows[drop.saturating_sub(60)..drop];
    let steady = pre.iter().map(|r| r.sent_bits_s).sum::<f64>() / pre.len() as f64;
    let stays_drained = |i: usize| rows[i..].iter().take(A7_LEVEL_SPAN_S).all(|r| r.backlog_bytes == 0);
    let Some(zero) = (restore..rows.len()).find(|&i| stays_drained(i)) else {
        return Err("backlog never drained".into());
    };
    let drain_s = rows[zero].t_s - rows[restore].t_s;
    let peak = rows[restore..=zero]
        .iter()
        .map(|r| r.sent_bits_s)
        .fold(0.0f64, f64::max);
    let level: Vec<&CommRow> = rows[zero + 1..].iter().take(A7_LEVEL_SPAN_S).collect();
    let levels_off = level.len() == A7_LEVEL_SPAN_S
        && level
            .iter()
            .all(|r| (r.sent_bits_s - steady).abs() <= A7_LEVEL_BAND * steady);
    let detail = format!(
        "backlog drained {drain_s}s after restore (max {A7_MAX_DRAIN_S}s); peak {:.2}x steady {:.0} b/s; levels off: {levels_off}",
        peak / steady,
        steady
    );
    check(
        drain_s <= A7_MAX_DRAIN_S && peak >= A7_MIN_PEAK_OVER_STEADY * steady && levels_off,
        detail,
    )
}

fn conservation(sc: &Scenario, plan: &PhysicalPlan) -> Result<String, String> {
    let injected = sc.records().count() as u64;
    let series = simulate(sc, plan, None);
    let t = &series.totals;
    if t.records_injected() != injected {
        return Err(format!("{injected} generated but {} injected", t.records_injected()));
    }
    let rates = steady_rates(&sc.spec);
    let expected: f64 = sc
        .spec
        .sinks
        .iter()
        .map(|s| rates.sinks.get(&s.id).map_or(0.0, |r| r.msgs_in))
        .sum::<f64>()
        / sc.spec.sources.iter().map(|s| s.rate).sum::<f64>()
        * injected as f64;
    if expected.fract() != 0.0 {
        return Err(format!("path product {expected} is not whole"));
    }
    for ch in plan.uplinks() {
        let enc = t.node(&ch.encoder_id()).map_or(0, |m| m.msgs_in);
        let dec = t.node(&ch.decoder_id()).map_or(0, |m| m.msgs_out);
        if enc != dec {
            return Err(format!("channel {}: {enc} encoded, {dec} decoded", ch.id));
        }
    }
    let at_sinks = t.records_at_sinks();
    check(
        at_sinks == expected as u64 && t.records_in_flight() == 0,
        format!(
            "{injected} injected, {at_sinks} at sinks (expected {expected}), {} in flight",
            t.records_in_flight()
        ),
    )
}

fn a8(r1: &Scenario, r2: &Scenario) -> Outcome {
    let opt = r1_optimized(r1);
    let r1_initial = conservation(r1, &opt.initial)?;
    let r1_final = conservation(r1, &opt.plan)?;
    let r2 = conservation(r2, &plan_for(r2, &r2.placement_or_initial()))?;
    Ok(format!("R1 initial: {r1_initial}; R1 optimized: {r1_final}; R2: {r2}"))
}

fn random_value(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..8) {
        0 => -0.0,
        1 => f64::MIN_POSITIVE / 3.0,
        2 => f64::MAX,
        3 => rng.gen_range(-1e3..1e3),
        4 => rng.gen_range(-1e3..1e3f64).round(),
        _ => loop {
            let v = f64::from_bits(rng.gen());
            if v.is_finite() {
                break v;
            }
        },
    }
}

fn random_batch(rng: &mut ChaCha8Rng) -> Batch {
    let sensors = rng.gen_range(1..=6);
    let n = rng.gen_range(1..=64);
    let mut t = rng.gen_range(0..1u64 << 40);
    let records = (0..n)
        .map(|_| {
            t += [0, 1, 100, rng.gen_range(0..10_000)][rng.gen_range(0..4)];
            Record::new(
                t,
                format!("dev/{}-{}", rng.gen_range(0..sensors), "é"),
                random_value(rng),
            )
        })
        .collect();
    Batch::new(format!("src{}", rng.gen_range(0..3)), records)
}

fn a9() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA9);
    for i in 0..A9_BATCHES {
        let batch = random_batch(&mut rng);
        for codec in CodecId::ALL {
            let enc = encode(codec, &batch).map_err(|e| format!("batch {i} {codec}: {e}"))?;
            let back = decode(codec, &enc.payload).map_err(|e| format!("batch {i} {codec}: {e}"))?;
            let same = back.len() == batch.records.len() && back.iter().zip(&batch.records).all(|(a, b)| a.bit_eq(b));
            if !same {
                return Err(format!("batch {i} {codec}: roundtrip differs"));
            }
        }
    }
    within(
        start.elapsed(),
        A9_MAX_RUNTIME,
        format!("{A9_BATCHES} batches x {} codecs bit-exact", CodecId::ALL.len()),
    )
}

fn artifacts(name: &str, sc: &Scenario) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let placement = if name == "r1" {
        let opt = r1_optimized(sc);
        out.insert("figure2.csv".into(), opt.figure2_csv());
        out.insert("moves.csv".into(), opt.moves_csv());
        opt.plan.placement.clone()
    } else {
        sc.placement_or_initial()
    };
    let plan = plan_for(sc, &placement);
    out.insert("metrics.csv".into(), simulate(sc, &plan, None).to_csv());
    if let Some(link) = replay_link(&plan) {
        let series = simulate(sc, &plan, Some(1.0));
        out.insert("figure3.csv".into(), comm_csv(&comm_series(&plan, &series, link)));
    }
    out
}

fn a10(scenarios: &[(&str, &Scenario)]) -> Outcome {
    let mut notes = Vec::new();
    for (name, sc) in scenarios {
        let first = artifacts(name, sc);
        let second = artifacts(name, sc);
        for (file, text) in &first {
            if second.get(file) != Some(text) {
                return Err(format!("{name}/{file} differs between runs"));
            }
            let digest = hex(&Sha256::digest(text.as_bytes()));
            let key = format!("{name}/{file}");
            match GOLDEN.iter().find(|(k, _)| *k == key) {
                Some((_, want)) if *want != digest => {
                    return Err(format!("{key} digest {digest} differs from frozen {want}"));
                }
                Some(_) => {}
                None => return Err(format!("{key} has no frozen digest")),
            }
            notes.push(format!("{key}={}", &digest[..12]));
        }
    }
    Ok(format!("byte-identical reruns; {}", notes.join(" ")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn main() {
    let r1 = common::load("r1");
    let r2 = common::load("r2");
    let rows = r2_rows(&r2);

    let criteria: Vec<Criterion<'_>> = vec![
        ("A1", "placement cost trajectory", Box::new(|| a1(&r1))),
        ("A2", "edge utilization", Box::new(|| a2(&r1))),
        ("A3", "greedy vs exhaustive", Box::new(a3)),
        ("A4", "what-if soundness", Box::new(a4)),
        ("A5", "reaction time", Box::new(|| a5(&rows))),
        ("A6", "bounded overshoot", Box::new(|| a6(&rows))),
        ("A7", "drain behavior", Box::new(|| a7(&rows))),
        ("A8", "losslessness and conservation", Box::new(|| a8(&r1, &r2))),
        ("A9", "codec roundtrip", Box::new(a9)),
        ("A10", "determinism", Box::new(|| a10(&[("r1", &r1), ("r2", &r2)]))),
    ];

    let mut failed = 0;
    for (id, name, f) in &criteria {
        match f() {
            Ok(detail) => println!("{id:<4} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id:<4} FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
