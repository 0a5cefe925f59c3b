//! Greedy placement: start everything in the cloud, then keep moving the
//! component whose move saves the most money per unit of edge CPU it takes,
//! until no move saves anything or the edges are full.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    cost_of_usage, edge_utilization, modeled_usage, predict_move, refine_with_shadow, steady_rates, AnalysisError,
    Prediction, RateVector, RatioTable,
};
use crate::fabric::{compile, FabricError, PhysicalPlan, Placement};
use crate::logical::LogicalSpec;
use crate::metrics::MetricsSeries;
use crate::money::MicroUsd;
use crate::sim::SimError;
use crate::topology::Topology;

pub const EFFICIENCY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_min_saving")]
    pub min_saving_usd_per_hour: f64,
    /// Sites a component may move to; all edge sites when absent.
    #[serde(default)]
    pub candidate_sites: Option<Vec<String>>,
    #[serde(default)]
    pub use_shadowing: bool,
    #[serde(default = "default_shadow_duration")]
    pub shadow_duration_s: f64,
}

fn default_max_iterations() -> u32 {
    100
}
fn default_min_saving() -> f64 {
    1e-6
}
fn default_shadow_duration() -> f64 {
    60.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: default_max_iterations(),
            min_saving_usd_per_hour: default_min_saving(),
            candidate_sites: None,
            use_shadowing: false,
            shadow_duration_s: default_shadow_duration(),
        }
    }
}

impl OptimizerConfig {
    pub fn from_json(text: &str) -> Result<Self, crate::logical::ParseError> {
        crate::logical::parse_json_document(text)
    }

    pub fn check(&self) -> Result<(), OptimizeError> {
        if self.max_iterations < 1 {
            return Err(OptimizeError::Config("max_iterations must be at least 1".into()));
        }
        if !(self.min_saving_usd_per_hour.is_finite() && self.min_saving_usd_per_hour >= 0.0) {
            return Err(OptimizeError::Config(
                "min_saving_usd_per_hour must be finite and non-negative".into(),
            ));
        }
        if self.use_shadowing && !(self.shadow_duration_s > 0.0) {
            return Err(OptimizeError::Config("shadow_duration_s must be positive".into()));
        }
        Ok(())
    }

    fn min_saving(&self) -> MicroUsd {
        MicroUsd::from_usd(self.min_saving_usd_per_hour).max(MicroUsd(1))
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("optimizer config error: {0}")]
    Config(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Components at the cloud unless pinned; sources and sinks at their sites.
pub fn initial_placement(spec: &LogicalSpec, topology: &Topology) -> Placement {
    let cloud = topology.cloud().id.clone();
    let mut p = Placement::default();
    for c in &spec.components {
        p.set(c.id.clone(), c.pinned_site.clone().unwrap_or_else(|| cloud.clone()));
    }
    p.with_fixed_nodes(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveRecord {
    pub iteration: u32,
    pub component: String,
    pub from: String,
    pub to: String,
    pub predicted_delta: MicroUsd,
    pub total: MicroUsd,
    pub edge_cpu_util: std::collections::BTreeMap<String, f64>,
    pub aggregate_edge_util: f64,
}

/// Inputs shared by every step of one optimization.
pub struct Model<'a> {
    pub rates: RateVector,
    pub ratios: &'a RatioTable,
    pub config: &'a OptimizerConfig,
}

fn efficiency(p: &Prediction, topology: &Topology) -> f64 {
    let cap = topology.site(&p.target).map_or(0.0, |s| s.cpu_units);
    let fraction = if cap > 0.0 {
        p.cpu_footprint / cap
    } else {
        f64::INFINITY
    };
    (-p.delta).to_usd() / fraction.max(EFFICIENCY_EPSILON)
}

/// Best qualifying move, or `None`. `excluded` lists (component, site)
/// pairs to skip.
pub fn select_move(
    plan: &PhysicalPlan,
    model: &Model<'_>,
    excluded: &BTreeSet<(String, String)>,
) -> Result<Option<Prediction>, FabricError> {
    let topology = &plan.topology;
    let costs = cost_of_usage(topology, &modeled_usage(plan, &model.rates, model.ratios));
    let mut movable: Vec<&str> = plan
        .spec
        .components
        .iter()
        .filter(|c| c.pinned_site.is_none())
        .map(|c| c.id.as_str())
        .collect();
    movable.sort_by(|a, b| costs.entity_total(b).cmp(&costs.entity_total(a)).then(a.cmp(b)));

    let sites: Vec<String> = match &model.config.candidate_sites {
        Some(s) => s.clone(),
        None => topology.edge_sites().map(|s| s.id.clone()).collect(),
    };
    let min_saving = model.config.min_saving();
    let mut best: Option<(f64, Prediction)> = None;
    for c in movable {
        let here = plan.site_of(c).expect("compiled plans place every component");
        for s in &sites {
            if s == here || excluded.contains(&(c.to_string(), s.clone())) {
                continue;
            }
            let p = predict_move(plan, c, s, &model.rates, model.ratios)?;
            if !p.feasible || -p.delta < min_saving {
                continue;
            }
            let e = efficiency(&p, topology);
            let better = match &best {
                None => true,
                Some((be, bp)) => e
                    .total_cmp(be)
                    .then((-p.delta).cmp(&-bp.delta))
                    .then(bp.component.cmp(&p.component))
                    .then(bp.target.cmp(&p.target))
                    .is_gt(),
            };
            if better {
                best = Some((e, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub initial: PhysicalPlan,
    pub initial_total: MicroUsd,
    pub initial_edge_util: f64,
    pub plan: PhysicalPlan,
    pub moves: Vec<MoveRecord>,
}

impl OptimizeResult {
    pub fn placement(&self) -> &Placement {
        &self.plan.placement
    }

    /// `iteration,component,from,to,delta_usd_h_micro,total_usd_h_micro,edge_cpu_util`
    pub fn moves_csv(&self) -> String {
        let mut out = String::from("iteration,component,from,to,delta_usd_h_micro,total_usd_h_micro,edge_cpu_util\n");
        for m in &self.moves {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.iteration,
                m.component,
                m.from,
                m.to,
                m.predicted_delta.micros(),
                m.total.micros(),
                m.aggregate_edge_util
            );
        }
        out
    }

    /// `iteration,total_usd_h_micro,edge_cpu_util`, starting at iteration 0.
    pub fn figure2_csv(&self) -> String {
        let mut out = String::from("iteration,total_usd_h_micro,edge_cpu_util\n");
        let _ = writeln!(out, "0,{},{}", self.initial_total.micros(), self.initial_edge_util);
        for m in &self.moves {
            let _ = writeln!(out, "{},{},{}", m.iteration, m.total.micros(), m.aggregate_edge_util);
        }
        out
    }
}

/// One row of `moves.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MoveRow {
    pub iteration: u32,
    pub component: String,
    pub from: String,
    pub to: String,
    pub delta_usd_h_micro: i64,
    pub total_usd_h_micro: i64,
    pub edge_cpu_util: f64,
}

/// One row of `figure2.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: u32,
    pub total_usd_h_micro: i64,
    pub edge_cpu_util: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(input: impl std::io::Read) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn read_moves_csv(input: impl std::io::Read) -> Result<Vec<MoveRow>, csv::Error> {
    read_rows(input)
}

pub fn read_figure2_csv(input: impl std::io::Read) -> Result<Vec<TrajectoryRow>, csv::Error> {
    read_rows(input)
}

/// Optional shadow runner: simulates a plan for a number of seconds.
pub type ShadowRunner<'a> = dyn Fn(&PhysicalPlan, f64) -> Result<MetricsSeries, SimError> + 'a;

pub fn optimize(
    spec: impl Into<Arc<LogicalSpec>>,
    topology: impl Into<Arc<Topology>>,
    config: &OptimizerConfig,
    ratios: &RatioTable,
    shadow: Option<&ShadowRunner<'_>>,
) -> Result<OptimizeResult, OptimizeError> {
    config.check()?;
    let spec = spec.into();
    let topology = topology.into();
    let initial = compile(spec.clone(), topology.clone(), &initial_placement(&spec, &topology))?;
    let model = Model {
        rates: steady_rates(&spec),
        ratios,
        config,
    };
    let usage = modeled_usage(&initial, &model.rates, ratios);
    let initial_total = cost_of_usage(&topology, &usage).total;
    let initial_edge_util = edge_utilization(&topology, &usage).1;

    let mut plan = initial.clone();
    let mut moves = Vec::new();
    let mut excluded = BTreeSet::new();
    while moves.len() < config.max_iterations as usize {
        let Some(mut p) = select_move(&plan, &model, &excluded)? else {
            break;
        };
        if config.use_shadowing {
            if let Some(run) = shadow {
                match refine_with_shadow(&p, &plan, &model.rates, ratios, config.shadow_duration_s, run) {
                    Ok(refined) if refined.feasible && -refined.delta >= config.min_saving() => p = refined,
                    Ok(_) | Err(AnalysisError::Fabric(FabricError::Capacity { .. })) => {
                        excluded.insert((p.component.clone(), p.target.clone()));
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let from = plan.site_of(&p.component).expect("placed").to_string();
        plan = plan.apply_move(&p.component, &p.target)?;
        excluded.clear();
        let usage = modeled_usage(&plan, &model.rates, ratios);
        let (per, agg) = edge_utilization(&topology, &usage);
        moves.push(MoveRecord {
            iteration: moves.len() as u32 + 1,
            component: p.component.clone(),
            from,
            to: p.target.clone(),
            predicted_delta: p.delta,
            total: cost_of_usage(&topology, &usage).total,
            edge_cpu_util: per,
            aggregate_edge_util: agg,
        });
    }
    Ok(OptimizeResult {
        initial,
        initial_total,
        initial_edge_util,
        plan,
        moves,
    })
}
