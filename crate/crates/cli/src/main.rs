use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use fogline::analysis::{cost_rate, observed_cost, steady_rates, Rates};
use fogline::fabric::{compile, FabricError, PhysicalPlan};
use fogline::logical::validate_with_topology;
use fogline::metrics::MetricsSeries;
use fogline::placement::{optimize, OptimizeError};
use fogline::report::{comm_csv, comm_series};
use fogline::scenario::Scenario;
use fogline::sim::{run, SimConfig, SimError};

#[derive(Parser, Debug)]
#[command(name = "fogline", version, about = "Edge-cloud IoT pipeline simulator and optimizer")]
struct Cli {
    /// Scenario file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory; overrides the scenario's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quiet: bool,
    /// Run several scenario files in parallel, each fully isolated.
    #[arg(long, global = true, num_args = 1.., value_name = "SCENARIO")]
    sweep: Vec<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Check the spec against the topology.
    Validate,
    /// Compile the placement into a physical plan and write plan.txt.
    Compile,
    /// Price the plan with the cost model and write analysis.csv.
    Analyze,
    /// Run the simulator and write metrics.csv, plan.txt and summary.txt.
    Simulate,
    /// Run the greedy placement loop and write moves.csv, figure2.csv and final_placement.json.
    OptimizePlacement,
    /// Replay the bandwidth schedule at 1 s resolution and write figure3.csv.
    ReplayComm,
}

/// Exit 2 for bad inputs, 1 for everything else.
#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Internal(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Internal(e) => e,
        }
    }
}

fn input(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn internal(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Internal(e.into())
}

fn sim_failure(e: SimError) -> Failure {
    if e.is_input_error() {
        input(e)
    } else {
        internal(e)
    }
}

fn fabric_failure(e: FabricError) -> Failure {
    input(e)
}

struct Job<'a> {
    scenario: Scenario,
    out: PathBuf,
    quiet: bool,
    log: &'a mut String,
}

impl Job<'_> {
    fn say(&mut self, line: impl AsRef<str>) {
        if !self.quiet {
            self.log.push_str(line.as_ref());
            if !line.as_ref().ends_with('\n') {
                self.log.push('\n');
            }
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create output directory `{}`", self.out.display()))
            .map_err(input)?;
        let path = self.out.join(name);
        fs::write(&path, contents)
            .with_context(|| format!("cannot write `{}`", path.display()))
            .map_err(input)?;
        self.say(format!("wrote {}", path.display()));
        Ok(())
    }

    fn plan(&self) -> Result<PhysicalPlan, Failure> {
        let sc = &self.scenario;
        let placement = sc.placement_or_initial().with_fixed_nodes(&sc.spec);
        compile(sc.spec.clone(), sc.topology.clone(), &placement).map_err(fabric_failure)
    }

    fn simulate(&self, plan: &PhysicalPlan, window_s: Option<f64>) -> Result<MetricsSeries, Failure> {
        let mut cfg = self.scenario.sim.clone();
        if let Some(w) = window_s {
            cfg.metrics_window_s = w;
        }
        run(plan, self.scenario.records(), &cfg).map_err(sim_failure)
    }
}

fn validate(job: &mut Job<'_>) -> Result<(), Failure> {
    let report = validate_with_topology(&job.scenario.spec, &job.scenario.topology);
    let text = report.to_string();
    if report.is_ok() {
        job.say(text);
        Ok(())
    } else {
        Err(input(anyhow!("validation failed:\n{}", text.trim_end())))
    }
}

fn compile_cmd(job: &mut Job<'_>) -> Result<(), Failure> {
    let plan = job.plan()?;
    let text = plan.summary();
    job.write("plan.txt", &text)?;
    job.say(text);
    Ok(())
}

fn analyze(job: &mut Job<'_>) -> Result<(), Failure> {
    let plan = job.plan()?;
    let ratios = job.scenario.ratio_table();
    let rates = steady_rates(&job.scenario.spec);
    let costs = cost_rate(&plan, Rates::Modeled(&rates, &ratios)).map_err(internal)?;
    job.write("analysis.csv", &costs.to_csv())?;
    job.say(costs.to_string());
    Ok(())
}

fn summary(sc: &Scenario, plan: &PhysicalPlan, series: &MetricsSeries) -> Result<String, Failure> {
    let t = &series.totals;
    let cost = observed_cost(plan, series).map_err(internal)?;
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", sc.spec.name);
    let _ = writeln!(s, "seed: {}", sc.sim.seed);
    let _ = writeln!(s, "duration_s: {}", t.duration_s());
    let _ = writeln!(s, "records_injected: {}", t.records_injected());
    let _ = writeln!(s, "records_at_sinks: {}", t.records_at_sinks());
    let _ = writeln!(s, "records_in_flight: {}", t.records_in_flight());
    for ch in plan.uplinks() {
        if let Some(m) = t.channel(&ch.id) {
            let _ = writeln!(
                s,
                "channel {}: offered_raw_bytes {} sent_encoded_bytes {} backlog_bytes {}",
                ch.id, m.bytes_offered_raw, m.bytes_sent_encoded, m.backlog_bytes
            );
        }
    }
    let _ = writeln!(s, "observed_cost_usd_per_hour: {}", cost.total.to_usd());
    Ok(s)
}

fn simulate_cmd(job: &mut Job<'_>) -> Result<(), Failure> {
    let plan = job.plan()?;
    let series = job.simulate(&plan, None)?;
    let summary = summary(&job.scenario, &plan, &series)?;
    job.write("metrics.csv", &series.to_csv())?;
    job.write("plan.txt", &plan.summary())?;
    job.write("summary.txt", &summary)?;
    job.say(summary);
    Ok(())
}

fn optimize_cmd(job: &mut Job<'_>) -> Result<(), Failure> {
    let sc = &job.scenario;
    let ratios = sc.ratio_table();
    let sim = sc.sim.clone();
    let records: Vec<_> = sc.records().collect();
    let shadow = |plan: &PhysicalPlan, duration_s: f64| -> Result<MetricsSeries, SimError> {
        let limit = (duration_s * 1000.0) as u64;
        let cfg = SimConfig {
            duration_s,
            ..sim.clone()
        };
        run(
            plan,
            records.iter().filter(|(_, r)| r.timestamp_ms < limit).cloned(),
            &cfg,
        )
    };
    let result = optimize(
        sc.spec.clone(),
        sc.topology.clone(),
        &sc.optimizer,
        &ratios,
        Some(&shadow),
    )
    .map_err(|e| match e {
        OptimizeError::Config(_) | OptimizeError::Fabric(_) => input(e),
        OptimizeError::Analysis(_) => internal(e),
    })?;
    job.write("moves.csv", &result.moves_csv())?;
    job.write("figure2.csv", &result.figure2_csv())?;
    job.write("final_placement.json", &result.placement().to_json())?;
    let mut s = format!("initial total ${:.6}/h\n", result.initial_total.to_usd());
    for m in &result.moves {
        let _ = writeln!(
            s,
            "{:>3}  {} {} -> {}  delta {}  total {}  edge util {:.3}",
            m.iteration, m.component, m.from, m.to, m.predicted_delta, m.total, m.aggregate_edge_util
        );
    }
    job.say(s);
    Ok(())
}

fn replay_comm(job: &mut Job<'_>) -> Result<(), Failure> {
    let plan = job.plan()?;
    let Some(link) = plan
        .topology
        .links
        .iter()
        .position(|l| l.bandwidth_schedule.steps.len() >= 2)
    else {
        return Err(input(anyhow!(
            "no link has a bandwidth schedule with at least 2 steps; nothing to replay"
        )));
    };
    let series = job.simulate(&plan, Some(1.0))?;
    let rows = comm_series(&plan, &series, link);
    job.write("figure3.csv", &comm_csv(&rows))?;
    Ok(())
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let sc = Scenario::load(path).map_err(input)?;
    Ok(match seed {
        Some(s) => sc.with_seed(s),
        None => sc,
    })
}

fn run_one(cli: &Cli, command: Command, path: &Path, out: Option<PathBuf>, log: &mut String) -> Result<(), Failure> {
    let scenario = load(path, cli.seed)?;
    let out = out
        .or_else(|| scenario.out.clone())
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("out"));
    let mut job = Job {
        scenario,
        out,
        quiet: cli.quiet,
        log,
    };
    match command {
        Command::Validate => validate(&mut job),
        Command::Compile => compile_cmd(&mut job),
        Command::Analyze => analyze(&mut job),
        Command::Simulate => simulate_cmd(&mut job),
        Command::OptimizePlacement => optimize_cmd(&mut job),
        Command::ReplayComm => replay_comm(&mut job),
    }
}

fn sweep_out(base: &Option<PathBuf>, path: &Path, index: usize) -> Option<PathBuf> {
    let base = base.as_ref()?;
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("scenario{index}"));
    Some(base.join(format!("{index:02}-{name}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let paths: Vec<PathBuf> = if cli.sweep.is_empty() {
        match &cli.scenario {
            Some(p) => vec![p.clone()],
            None => {
                eprintln!("error: --scenario <path> or --sweep <paths>... is required");
                return ExitCode::from(2);
            }
        }
    } else {
        cli.sweep.clone()
    };

    let sweeping = !cli.sweep.is_empty();
    let results: Vec<(String, Result<(), Failure>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .enumerate()
            .map(|(i, path)| {
                let cli = &cli;
                let out = if sweeping {
                    sweep_out(&cli.out, path, i)
                } else {
                    cli.out.clone()
                };
                scope.spawn(move || {
                    let mut log = String::new();
                    let r = run_one(cli, cli.command, path, out, &mut log);
                    (log, r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| (String::new(), Err(internal(anyhow!("worker panicked")))))
            })
            .collect()
    });

    let mut code = 0u8;
    for ((log, result), path) in results.into_iter().zip(&paths) {
        print!("{log}");
        if let Err(f) = result {
            eprintln!("error: {}: {:#}", path.display(), f.error());
            code = code.max(f.code());
        }
    }
    ExitCode::from(code)
}
