//! Scenario files: one JSON document naming every input of a run. Paths
//! are resolved relative to the scenario file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::analysis::{RatioTable, SAMPLE_BATCHES};
use crate::fabric::Placement;
use crate::logical::{parse_spec, LogicalSpec};
use crate::placement::{initial_placement, OptimizerConfig};
use crate::sim::SimConfig;
use crate::topology::{parse_topology, Topology};
use crate::workload::{generate, replay, Record, WorkloadSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    spec: String,
    topology: String,
    #[serde(default)]
    workload: Option<String>,
    #[serde(default)]
    trace: Option<String>,
    sim: String,
    #[serde(default)]
    optimizer: Option<String>,
    #[serde(default)]
    placement: Option<String>,
    #[serde(default)]
    out: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Generated(WorkloadSpec),
    Trace(Vec<(String, Record)>),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub path: PathBuf,
    pub spec: LogicalSpec,
    pub topology: Topology,
    pub workload: WorkloadSource,
    pub sim: SimConfig,
    pub optimizer: OptimizerConfig,
    /// Explicit placement, if the scenario names one.
    pub placement: Option<Placement>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("`{path}`: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("scenario `{path}`: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let doc: ScenarioDoc = crate::logical::parse_json_document(&read(path)?).map_err(|e| parse_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| base.join(p);

        let spec_path = resolve(&doc.spec);
        let spec = parse_spec(&read(&spec_path)?).map_err(|e| parse_err(&spec_path, e))?;
        let topo_path = resolve(&doc.topology);
        let topology = parse_topology(&read(&topo_path)?).map_err(|e| parse_err(&topo_path, e))?;

        let workload = match (&doc.workload, &doc.trace) {
            (Some(w), None) => {
                let p = resolve(w);
                let ws: WorkloadSpec = crate::logical::parse_json_document(&read(&p)?).map_err(|e| parse_err(&p, e))?;
                ws.check().map_err(|e| parse_err(&p, e))?;
                WorkloadSource::Generated(ws)
            }
            (None, Some(t)) => {
                let p = resolve(t);
                let text = read(&p)?;
                WorkloadSource::Trace(replay(text.as_bytes()).map_err(|e| parse_err(&p, e))?)
            }
            _ => {
                return Err(ScenarioError::Invalid {
                    path: path.to_path_buf(),
                    message: "exactly one of `workload` and `trace` must be given".into(),
                })
            }
        };

        let sim_path = resolve(&doc.sim);
        let sim = SimConfig::from_json(&read(&sim_path)?).map_err(|e| parse_err(&sim_path, e))?;
        sim.check().map_err(|e| parse_err(&sim_path, e))?;

        let optimizer = match &doc.optimizer {
            Some(o) => {
                let p = resolve(o);
                let c = OptimizerConfig::from_json(&read(&p)?).map_err(|e| parse_err(&p, e))?;
                c.check().map_err(|e| parse_err(&p, e))?;
                c
            }
            None => OptimizerConfig::default(),
        };
        let placement = match &doc.placement {
            Some(pl) => {
                let p = resolve(pl);
                Some(Placement::from_json(&read(&p)?).map_err(|e| parse_err(&p, e))?)
            }
            None => None,
        };
        Ok(Scenario {
            path: path.to_path_buf(),
            spec,
            topology,
            workload,
            sim,
            optimizer,
            placement,
            out: doc.out.map(|o| resolve(&o)),
        })
    }

    /// The scenario's placement, or the all-in-cloud starting point.
    pub fn placement_or_initial(&self) -> Placement {
        self.placement
            .clone()
            .unwrap_or_else(|| initial_placement(&self.spec, &self.topology))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        if let WorkloadSource::Generated(w) = &mut self.workload {
            w.seed = seed;
        }
        self
    }

    /// Records from the first seconds of the workload, enough to estimate
    /// compression ratios.
    pub fn sample(&self) -> Vec<(String, Record)> {
        sample_of(self.records())
    }

    /// Prior ratios refined by encoding [`Scenario::sample`].
    pub fn ratio_table(&self) -> RatioTable {
        RatioTable::default().with_sample(&self.spec, &self.sample(), self.sim.tick_ms)
    }

    pub fn records(&self) -> Box<dyn Iterator<Item = (String, Record)> + '_> {
        match &self.workload {
            WorkloadSource::Generated(w) => Box::new(generate(w).expect("workload checked at load")),
            WorkloadSource::Trace(t) => Box::new(t.iter().cloned()),
        }
    }
}

/// The leading records of a time-ordered workload, covering
/// [`SAMPLE_BATCHES`] seconds after the first record.
pub fn sample_of(records: impl IntoIterator<Item = (String, Record)>) -> Vec<(String, Record)> {
    let mut out = Vec::new();
    let mut end = None;
    for (src, r) in records {
        let limit = *end.get_or_insert(r.timestamp_ms / 1000 * 1000 + SAMPLE_BATCHES as u64 * 1000);
        if r.timestamp_ms >= limit {
            break;
        }
        out.push((src, r));
    }
    out
}
