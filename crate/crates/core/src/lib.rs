//! Edge-cloud IoT pipeline toolkit: logical specs, topologies, placement,
//! simulation, cost analysis and adaptive uplink compression.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod codec;
pub mod comm;
pub mod fabric;
pub mod logical;
pub mod metrics;
pub mod money;
pub mod placement;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod workload;

pub use analysis::{cost_rate, predict_move, steady_rates, CostBreakdown, Prediction, RateVector, Rates, RatioTable};
pub use codec::{decode, encode, Batch, CodecId, EncodedBatch};
pub use fabric::{compile, PhysicalPlan, Placement};
pub use logical::{parse_spec, validate, LogicalSpec};
pub use metrics::{MetricsSeries, MetricsWindow};
pub use money::MicroUsd;
pub use placement::{optimize, OptimizeResult, OptimizerConfig};
pub use scenario::Scenario;
pub use sim::{run, SimConfig, Simulation};
pub use topology::{bandwidth_at, parse_topology, Direction, Topology};
pub use workload::{generate, Record, WorkloadSpec};
