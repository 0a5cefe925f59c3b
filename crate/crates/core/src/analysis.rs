//! Cost model and what-if predictions.
//!
//! Both modeled rates (from the DAG) and observed metrics are first turned
//! into a [`Usage`] table of per-entity rates, which [`cost_of_usage`] then
//! prices. Money is rounded to micro-dollars per hour part by part, so a
//! breakdown's total is exactly the sum of its parts.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::codec::{encode, Batch, CodecId};
use crate::comm::prior_ratio;
use crate::fabric::{CodecRole, FabricError, PhysicalPlan};
use crate::logical::{topological_order, LogicalSpec, SinkKind};
use crate::metrics::{MetricsCsvError, MetricsSeries, MetricsWindow};
use crate::money::MicroUsd;
use crate::sim::SimError;
use crate::topology::{Direction, PricingTable, Topology};
use crate::workload::Record;

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ComponentRates {
    pub msgs_in: f64,
    pub msgs_out: f64,
    pub bytes_out: f64,
}

/// Steady-state message rates implied by source rates and selectivities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateVector {
    pub sources: BTreeMap<String, ComponentRates>,
    pub components: BTreeMap<String, ComponentRates>,
    pub sinks: BTreeMap<String, ComponentRates>,
}

impl RateVector {
    /// Output rate and declared bytes per message of a producing node.
    pub fn output_of(&self, spec: &LogicalSpec, id: &str) -> (f64, u64) {
        if let Some(s) = spec.source(id) {
            return (s.rate, s.bytes_per_msg);
        }
        match (self.components.get(id), spec.component(id)) {
            (Some(r), Some(c)) => (r.msgs_out, c.out_bytes_per_msg),
            _ => (0.0, 0),
        }
    }
}

pub fn steady_rates(spec: &LogicalSpec) -> RateVector {
    let mut rv = RateVector::default();
    let order = topological_order(spec).unwrap_or_else(|_| spec.node_ids().map(str::to_string).collect());
    for id in &order {
        if let Some(s) = spec.source(id) {
            rv.sources.insert(
                id.clone(),
                ComponentRates {
                    msgs_in: 0.0,
                    msgs_out: s.rate,
                    bytes_out: s.rate * s.bytes_per_msg as f64,
                },
            );
            continue;
        }
        let msgs_in: f64 = spec.predecessors(id).map(|p| rv.output_of(spec, p).0).sum();
        if let Some(c) = spec.component(id) {
            let msgs_out = msgs_in * c.selectivity;
            rv.components.insert(
                id.clone(),
                ComponentRates {
                    msgs_in,
                    msgs_out,
                    bytes_out: msgs_out * c.out_bytes_per_msg as f64,
                },
            );
        } else {
            let bytes: f64 = spec
                .predecessors(id)
                .map(|p| {
                    let (m, b) = rv.output_of(spec, p);
                    m * b as f64
                })
                .sum();
            rv.sinks.insert(
                id.clone(),
                ComponentRates {
                    msgs_in,
                    msgs_out: 0.0,
                    bytes_out: bytes,
                },
            );
        }
    }
    rv
}

/// Compression ratios used by the model. Codec-level values start at the
/// controller priors. Sampled values, when present, give per-producer ratios
/// for every codec. Calibrated values, learned from a run, replace the ratio
/// of whatever codec a channel ends up with.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    pub codec: [f64; 6],
    pub sampled: BTreeMap<String, [f64; 6]>,
    pub producer: BTreeMap<String, f64>,
}

impl Default for RatioTable {
    fn default() -> Self {
        RatioTable {
            codec: CodecId::ALL.map(prior_ratio),
            sampled: BTreeMap::new(),
            producer: BTreeMap::new(),
        }
    }
}

impl RatioTable {
    pub fn codec_ratio(&self, codec: CodecId) -> f64 {
        self.codec[codec.ordinal()]
    }

    /// Ratio of `codec` on the stream `producer` emits.
    pub fn ratio_of(&self, producer: &str, codec: CodecId) -> f64 {
        self.sampled
            .get(producer)
            .map_or_else(|| self.codec_ratio(codec), |r| r[codec.ordinal()])
    }

    /// Wire-to-declared ratio the model charges for a channel.
    pub fn effective(&self, producer: &str, codec: CodecId) -> f64 {
        self.producer
            .get(producer)
            .copied()
            .unwrap_or_else(|| self.ratio_of(producer, codec))
    }

    /// Learns the effective wire-to-declared ratio of every uplink producer
    /// from a run's encoder counters.
    pub fn calibrate(&mut self, plan: &PhysicalPlan, metrics: &MetricsWindow) {
        for ch in plan.uplinks() {
            if let Some(enc) = metrics.node(&ch.encoder_id()) {
                if enc.bytes_in > 0 {
                    self.producer
                        .insert(ch.edge.0.clone(), enc.bytes_out as f64 / enc.bytes_in as f64);
                }
            }
        }
    }

    pub fn calibrated(plan: &PhysicalPlan, metrics: &MetricsWindow) -> Self {
        let mut t = RatioTable::default();
        t.calibrate(plan, metrics);
        t
    }

    /// Adds sampled ratios for every producer in `spec`.
    pub fn with_sample(mut self, spec: &LogicalSpec, sample: &[(String, Record)], tick_ms: u64) -> Self {
        self.sampled = sample_ratios(spec, sample, tick_ms);
        self
    }
}

/// Seconds of batches [`sample_ratios`] encodes per producer.
pub const SAMPLE_BATCHES: usize = 10;

/// Measures every codec on each producer's output stream, batched per
/// second the way an uplink would batch it. Component outputs are derived
/// from the sample by selectivity thinning, stamped at tick granularity.
/// Producers whose sample is empty are left out.
pub fn sample_ratios(spec: &LogicalSpec, sample: &[(String, Record)], tick_ms: u64) -> BTreeMap<String, [f64; 6]> {
    let tick = tick_ms.max(1);
    let mut streams: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for s in &spec.sources {
        let recs = sample
            .iter()
            .filter(|(src, _)| *src == s.id)
            .map(|(_, r)| r.clone())
            .collect();
        streams.insert(s.id.clone(), recs);
    }
    let order = topological_order(spec).unwrap_or_default();
    for id in &order {
        let Some(c) = spec.component(id) else {
            continue;
        };
        let mut input: Vec<Record> = spec
            .predecessors(id)
            .filter_map(|p| streams.get(p))
            .flatten()
            .cloned()
            .collect();
        input.sort_by_key(|r| r.timestamp_ms);
        let mut out = Vec::new();
        for (n, r) in input.into_iter().enumerate() {
            let before = (n as f64 * c.selectivity + 0.5).floor() as u64;
            let after = ((n + 1) as f64 * c.selectivity + 0.5).floor() as u64;
            for _ in before..after {
                out.push(Record::new(r.timestamp_ms / tick * tick, r.sensor_id.clone(), r.value));
            }
        }
        streams.insert(id.clone(), out);
    }

    let mut ratios = BTreeMap::new();
    for (id, recs) in &streams {
        let mut slots: BTreeMap<u64, Vec<Record>> = BTreeMap::new();
        for r in recs {
            slots.entry(r.timestamp_ms / 1000).or_default().push(r.clone());
        }
        let batches: Vec<Batch> = slots
            .into_values()
            .take(SAMPLE_BATCHES)
            .map(|records| Batch::new(id.clone(), records))
            .collect();
        if batches.is_empty() {
            continue;
        }
        let mut r = [0.0; 6];
        let mut ok = true;
        for codec in CodecId::ALL {
            let (mut payload, mut json) = (0usize, 0usize);
            for b in &batches {
                match encode(codec, b) {
                    Ok(e) => {
                        payload += e.payload.len();
                        json += e.raw_bytes;
                    }
                    Err(_) => ok = false,
                }
            }
            r[codec.ordinal()] = if json > 0 { payload as f64 / json as f64 } else { 1.0 };
        }
        if ok {
            ratios.insert(id.clone(), r);
        }
    }
    ratios
}

/// The codec the model assumes for an uplink carrying `producer`'s stream:
/// cheapest transfer, then least encoder CPU, then declaration order.
/// Bandwidth is not considered.
pub fn modeled_codec(topology: &Topology, producer: &str, per_gb_cost: f64, ratios: &RatioTable) -> CodecId {
    CodecId::ALL
        .into_iter()
        .min_by(|&a, &b| {
            (ratios.ratio_of(producer, a) * per_gb_cost)
                .total_cmp(&(ratios.ratio_of(producer, b) * per_gb_cost))
                .then(topology.codec_cpu.encoder(a).total_cmp(&topology.codec_cpu.encoder(b)))
                .then(a.ordinal().cmp(&b.ordinal()))
        })
        .expect("codec list is not empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Component,
    Codec,
    Shadow,
    Sink,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [
        EntityKind::Component,
        EntityKind::Codec,
        EntityKind::Shadow,
        EntityKind::Sink,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Component => "component",
            EntityKind::Codec => "codec",
            EntityKind::Shadow => "shadow",
            EntityKind::Sink => "sink",
        }
    }
}

/// Per-second resource use of one priced entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityUsage {
    pub kind: EntityKind,
    pub site: String,
    pub cpu_units: f64,
    pub msgs_in: f64,
    pub ingress_bytes: f64,
    pub storage_bytes: f64,
    pub mem_mb: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Usage {
    pub entities: BTreeMap<String, EntityUsage>,
    /// Bytes/s per (link index, direction).
    pub links: BTreeMap<(usize, Direction), f64>,
}

impl Usage {
    /// CPU units demanded at each site.
    pub fn cpu_by_site(&self) -> BTreeMap<&str, f64> {
        let mut out: BTreeMap<&str, f64> = BTreeMap::new();
        for e in self.entities.values() {
            *out.entry(e.site.as_str()).or_default() += e.cpu_units;
        }
        out
    }

    pub fn mem_by_site(&self) -> BTreeMap<&str, f64> {
        let mut out: BTreeMap<&str, f64> = BTreeMap::new();
        for e in self.entities.values() {
            *out.entry(e.site.as_str()).or_default() += e.mem_mb;
        }
        out
    }
}

/// Modeled usage of a plan at steady-state rates.
pub fn modeled_usage(plan: &PhysicalPlan, rates: &RateVector, ratios: &RatioTable) -> Usage {
    let spec = &plan.spec;
    let topology = &plan.topology;
    let speed = |site: &str| topology.site(site).map_or(1.0, |s| s.speed_factor);
    let mut usage = Usage::default();
    for c in &spec.components {
        let site = plan
            .site_of(&c.id)
            .expect("compiled plans place every component")
            .to_string();
        let msgs_in = rates.components.get(&c.id).map_or(0.0, |r| r.msgs_in);
        usage.entities.insert(
            c.id.clone(),
            EntityUsage {
                kind: EntityKind::Component,
                cpu_units: msgs_in * c.cpu_units_per_msg / speed(&site),
                site,
                msgs_in,
                ingress_bytes: 0.0,
                storage_bytes: 0.0,
                mem_mb: c.mem_mb,
            },
        );
    }
    for sh in &plan.shadows {
        let c = spec.component(&sh.component).expect("shadows reference components");
        let msgs_in = rates.components.get(&c.id).map_or(0.0, |r| r.msgs_in);
        usage.entities.insert(
            sh.id(),
            EntityUsage {
                kind: EntityKind::Shadow,
                site: sh.site.clone(),
                cpu_units: msgs_in * c.cpu_units_per_msg / speed(&sh.site),
                msgs_in,
                ingress_bytes: 0.0,
                storage_bytes: 0.0,
                mem_mb: c.mem_mb,
            },
        );
    }
    for k in &spec.sinks {
        let r = rates.sinks.get(&k.id).copied().unwrap_or_default();
        usage.entities.insert(
            k.id.clone(),
            EntityUsage {
                kind: EntityKind::Sink,
                site: k.site_id.clone(),
                cpu_units: 0.0,
                msgs_in: r.msgs_in,
                ingress_bytes: 0.0,
                storage_bytes: if k.kind == SinkKind::Storage { r.bytes_out } else { 0.0 },
                mem_mb: 0.0,
            },
        );
    }
    for ch in plan.uplinks() {
        let (msgs, declared) = rates.output_of(spec, &ch.edge.0);
        let raw = msgs * declared as f64;
        let per_gb: f64 = ch.route.iter().map(|h| topology.links[h.link].per_gb_cost).sum();
        let codec = modeled_codec(topology, &ch.edge.0, per_gb, ratios);
        let ratio = ratios.effective(&ch.edge.0, codec);
        let wire = raw * ratio;
        for c in plan.injected.iter().filter(|c| c.channel == ch.id) {
            let per_msg = c.cpu_units_per_msg(topology, codec);
            usage.entities.insert(
                c.id.clone(),
                EntityUsage {
                    kind: EntityKind::Codec,
                    site: c.site.clone(),
                    cpu_units: msgs * per_msg / speed(&c.site),
                    msgs_in: msgs,
                    ingress_bytes: if c.role == CodecRole::Decoder { wire } else { 0.0 },
                    storage_bytes: 0.0,
                    mem_mb: 0.0,
                },
            );
        }
        for h in &ch.route {
            *usage.links.entry((h.link, h.direction)).or_default() += wire;
        }
    }
    usage
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnalysisError {
    #[error("metrics have no entry for `{0}`")]
    MissingMetric(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("shadow run failed: {0}")]
    Shadow(String),
    #[error("prediction is infeasible; refusing to shadow")]
    Infeasible,
}

impl From<SimError> for AnalysisError {
    fn from(e: SimError) -> Self {
        AnalysisError::Shadow(e.to_string())
    }
}

/// Observed usage: every counter in `window` divided by its duration.
pub fn observed_usage(plan: &PhysicalPlan, window: &MetricsWindow) -> Result<Usage, AnalysisError> {
    let span = window.duration_s();
    let per_s = |v: f64| if span > 0.0 { v / span } else { 0.0 };
    let topology = &plan.topology;
    let mut usage = Usage::default();
    let mut take = |id: &str, kind: EntityKind, site: &str, mem_mb: f64, stores: bool| -> Result<(), AnalysisError> {
        let m = window
            .node(id)
            .ok_or_else(|| AnalysisError::MissingMetric(id.to_string()))?;
        let decoder = kind == EntityKind::Codec && id.starts_with("dec:");
        usage.entities.insert(
            id.to_string(),
            EntityUsage {
                kind,
                site: site.to_string(),
                cpu_units: per_s(m.cpu_units_used),
                msgs_in: per_s(m.msgs_in as f64),
                ingress_bytes: if decoder { per_s(m.bytes_in as f64) } else { 0.0 },
                storage_bytes: if stores { per_s(m.bytes_in as f64) } else { 0.0 },
                mem_mb,
            },
        );
        Ok(())
    };
    for c in &plan.spec.components {
        take(
            &c.id,
            EntityKind::Component,
            plan.site_of(&c.id).unwrap_or_default(),
            c.mem_mb,
            false,
        )?;
    }
    for sh in &plan.shadows {
        let mem = plan.spec.component(&sh.component).map_or(0.0, |c| c.mem_mb);
        take(&sh.id(), EntityKind::Shadow, &sh.site, mem, false)?;
    }
    for k in &plan.spec.sinks {
        take(&k.id, EntityKind::Sink, &k.site_id, 0.0, k.kind == SinkKind::Storage)?;
    }
    for c in &plan.injected {
        take(&c.id, EntityKind::Codec, &c.site, 0.0, false)?;
    }
    for (i, link) in topology.links.iter().enumerate() {
        let key = format!("{}-{}", link.from, link.to);
        let m = window
            .links
            .get(&key)
            .ok_or_else(|| AnalysisError::MissingMetric(key.clone()))?;
        if m.bytes_up > 0 {
            usage.links.insert((i, Direction::Up), per_s(m.bytes_up as f64));
        }
        if m.bytes_down > 0 {
            usage.links.insert((i, Direction::Down), per_s(m.bytes_down as f64));
        }
    }
    Ok(usage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntityCost {
    pub compute: MicroUsd,
    pub invocations: MicroUsd,
    pub ingress: MicroUsd,
    pub storage_write: MicroUsd,
}

impl EntityCost {
    pub fn total(&self) -> MicroUsd {
        self.compute + self.invocations + self.ingress + self.storage_write
    }
}

/// Dollars per hour, split by entity and dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostBreakdown {
    pub entities: BTreeMap<String, (EntityKind, EntityCost)>,
    /// Provisioned capacity, keyed by site id.
    pub provisioned: BTreeMap<String, MicroUsd>,
    /// Transfer cost, keyed `from-to`.
    pub links: BTreeMap<String, MicroUsd>,
    pub total: MicroUsd,
}

impl CostBreakdown {
    pub fn entity_total(&self, id: &str) -> MicroUsd {
        self.entities.get(id).map_or(MicroUsd::ZERO, |(_, c)| c.total())
    }

    pub fn sum_of_parts(&self) -> MicroUsd {
        self.entities.values().map(|(_, c)| c.total()).sum::<MicroUsd>()
            + self.provisioned.values().sum::<MicroUsd>()
            + self.links.values().sum::<MicroUsd>()
    }

    /// Rows of `entity,dimension,usd_per_hour_micro`, ending with the total.
    /// Entities ordered by kind, then id.
    pub fn ordered(&self) -> Vec<(&str, EntityKind, &EntityCost)> {
        let mut v: Vec<_> = self.entities.iter().map(|(id, (k, c))| (id.as_str(), *k, c)).collect();
        v.sort_by_key(|&(id, k, _)| (k, id));
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("entity,dimension,usd_per_hour_micro\n");
        for (id, kind, c) in self.ordered() {
            for (dim, v) in [
                ("compute", c.compute),
                ("invocations", c.invocations),
                ("ingress", c.ingress),
                ("storage_write", c.storage_write),
            ] {
                let _ = writeln!(out, "{}:{id},{dim},{}", kind.as_str(), v.micros());
            }
        }
        for (site, v) in &self.provisioned {
            let _ = writeln!(out, "site:{site},provisioned,{}", v.micros());
        }
        for (link, v) in &self.links {
            let _ = writeln!(out, "link:{link},transfer,{}", v.micros());
        }
        let _ = writeln!(out, "total,total,{}", self.total.micros());
        out
    }
}

impl CostBreakdown {
    /// Reads what [`CostBreakdown::to_csv`] writes.
    pub fn from_csv<R: std::io::Read>(input: R) -> Result<Self, MetricsCsvError> {
        let mut b = CostBreakdown::default();
        let mut reader = csv::Reader::from_reader(input);
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let line = i as u64 + 2;
            let bad = |message: String| MetricsCsvError::Format { line, message };
            let (entity, dim, value) = match (row.get(0), row.get(1), row.get(2)) {
                (Some(e), Some(d), Some(v)) => (e, d, v),
                _ => return Err(bad("expected 3 fields".into())),
            };
            let v = MicroUsd(value.parse().map_err(|_| bad(format!("bad amount `{value}`")))?);
            let (prefix, id) = entity.split_once(':').unwrap_or((entity, ""));
            match (prefix, dim) {
                ("total", "total") => b.total = v,
                ("site", "provisioned") => {
                    b.provisioned.insert(id.to_string(), v);
                }
                ("link", "transfer") => {
                    b.links.insert(id.to_string(), v);
                }
                _ => {
                    let kind = EntityKind::ALL
                        .into_iter()
                        .find(|k| k.as_str() == prefix)
                        .ok_or_else(|| bad(format!("unknown entity `{entity}`")))?;
                    let slot = &mut b
                        .entities
                        .entry(id.to_string())
                        .or_insert((kind, EntityCost::default()))
                        .1;
                    match dim {
                        "compute" => slot.compute = v,
                        "invocations" => slot.invocations = v,
                        "ingress" => slot.ingress = v,
                        "storage_write" => slot.storage_write = v,
                        _ => return Err(bad(format!("unknown dimension `{dim}`"))),
                    }
                }
            }
        }
        Ok(b)
    }
}

impl fmt::Display for CostBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>14} {:>14} {:>14} {:>14} {:>14}",
            "entity", "compute", "invocations", "ingress", "storage", "total"
        )?;
        for (id, kind, c) in self.ordered() {
            writeln!(
                f,
                "{:<32} {:>14} {:>14} {:>14} {:>14} {:>14}",
                format!("{}:{id}", kind.as_str()),
                c.compute.to_string(),
                c.invocations.to_string(),
                c.ingress.to_string(),
                c.storage_write.to_string(),
                c.total().to_string()
            )?;
        }
        for (site, v) in &self.provisioned {
            writeln!(f, "{:<32} {:>74}", format!("site:{site} provisioned"), v.to_string())?;
        }
        for (link, v) in &self.links {
            writeln!(f, "{:<32} {:>74}", format!("link:{link} transfer"), v.to_string())?;
        }
        writeln!(f, "{:<32} {:>74}", "total $/h", self.total.to_string())
    }
}

fn pricing<'a>(topology: &'a Topology, site: &str) -> &'a PricingTable {
    &topology.site(site).expect("usage references known sites").pricing
}

pub fn cost_of_usage(topology: &Topology, usage: &Usage) -> CostBreakdown {
    let mut b = CostBreakdown::default();
    let mut hosting: BTreeMap<&str, bool> = BTreeMap::new();
    for (id, e) in &usage.entities {
        let p = pricing(topology, &e.site);
        let cost = EntityCost {
            compute: MicroUsd::from_usd(e.cpu_units * p.per_cpu_unit_second * 3600.0),
            invocations: MicroUsd::from_usd(e.msgs_in * 3600.0 / 1e6 * p.per_million_invocations),
            ingress: MicroUsd::from_usd(e.ingress_bytes * 3600.0 / GIB * p.per_gb_ingress),
            storage_write: MicroUsd::from_usd(e.storage_bytes * 3600.0 / GIB * p.per_gb_storage_write),
        };
        if matches!(e.kind, EntityKind::Component | EntityKind::Shadow) {
            hosting.insert(e.site.as_str(), true);
        }
        b.entities.insert(id.clone(), (e.kind, cost));
    }
    for site in &topology.sites {
        if let (Some(u), true) = (&site.pricing.provisioned_unit, hosting.contains_key(site.id.as_str())) {
            b.provisioned
                .insert(site.id.clone(), MicroUsd::from_usd(u.units as f64 * u.per_unit_hour));
        }
    }
    for (i, link) in topology.links.iter().enumerate() {
        let bytes: f64 = [Direction::Up, Direction::Down]
            .iter()
            .filter_map(|d| usage.links.get(&(i, *d)))
            .sum();
        if bytes > 0.0 {
            b.links.insert(
                format!("{}-{}", link.from, link.to),
                MicroUsd::from_usd(bytes * 3600.0 / GIB * link.per_gb_cost),
            );
        }
    }
    b.total = b.sum_of_parts();
    b
}

/// Source of per-entity rates for [`cost_rate`].
pub enum Rates<'a> {
    Modeled(&'a RateVector, &'a RatioTable),
    Observed(&'a MetricsWindow),
}

pub fn cost_rate(plan: &PhysicalPlan, rates: Rates<'_>) -> Result<CostBreakdown, AnalysisError> {
    let usage = match rates {
        Rates::Modeled(rv, ratios) => modeled_usage(plan, rv, ratios),
        Rates::Observed(w) => observed_usage(plan, w)?,
    };
    Ok(cost_of_usage(&plan.topology, &usage))
}

/// Convenience: observed cost over a whole run.
pub fn observed_cost(plan: &PhysicalPlan, series: &MetricsSeries) -> Result<CostBreakdown, AnalysisError> {
    cost_rate(plan, Rates::Observed(&series.totals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Confidence {
    Modeled,
    ShadowRefined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub component: String,
    pub target: String,
    pub predicted_total: MicroUsd,
    /// Negative means the move saves money.
    pub delta: MicroUsd,
    pub feasible: bool,
    /// CPU units and MiB the component would use at the target.
    pub cpu_footprint: f64,
    pub mem_footprint: f64,
    pub confidence: Confidence,
}

/// True when every edge site's demand fits its CPU and memory.
pub fn fits_edges(topology: &Topology, usage: &Usage) -> bool {
    let cpu = usage.cpu_by_site();
    let mem = usage.mem_by_site();
    topology.edge_sites().all(|s| {
        cpu.get(s.id.as_str()).copied().unwrap_or(0.0) <= s.cpu_units + 1e-12
            && mem.get(s.id.as_str()).copied().unwrap_or(0.0) <= s.mem_mb
    })
}

/// Modeled CPU utilization per edge site and in aggregate (Σ used / Σ cap).
pub fn edge_utilization(topology: &Topology, usage: &Usage) -> (BTreeMap<String, f64>, f64) {
    let cpu = usage.cpu_by_site();
    let mut per = BTreeMap::new();
    let (mut used, mut cap) = (0.0, 0.0);
    for s in topology.edge_sites() {
        let u = cpu.get(s.id.as_str()).copied().unwrap_or(0.0);
        per.insert(s.id.clone(), if s.cpu_units > 0.0 { u / s.cpu_units } else { 0.0 });
        used += u;
        cap += s.cpu_units;
    }
    (per, if cap > 0.0 { used / cap } else { 0.0 })
}

pub fn predict_move(
    plan: &PhysicalPlan,
    component: &str,
    target: &str,
    rates: &RateVector,
    ratios: &RatioTable,
) -> Result<Prediction, FabricError> {
    let hypothetical = plan.moved(component, target, false)?;
    let current = cost_of_usage(&plan.topology, &modeled_usage(plan, rates, ratios));
    let usage = modeled_usage(&hypothetical, rates, ratios);
    Ok(prediction_from(
        plan,
        component,
        target,
        &current,
        &hypothetical,
        &usage,
        Confidence::Modeled,
    ))
}

fn prediction_from(
    plan: &PhysicalPlan,
    component: &str,
    target: &str,
    current: &CostBreakdown,
    hypothetical: &PhysicalPlan,
    usage: &Usage,
    confidence: Confidence,
) -> Prediction {
    let after = cost_of_usage(&plan.topology, usage);
    let e = &usage.entities[component];
    Prediction {
        component: component.to_string(),
        target: target.to_string(),
        predicted_total: after.total,
        delta: after.total - current.total,
        feasible: fits_edges(&hypothetical.topology, usage),
        cpu_footprint: e.cpu_units,
        mem_footprint: e.mem_mb,
        confidence,
    }
}

/// Re-derives a prediction from a real shadow run. `run_shadow` simulates
/// the given plan for the given number of seconds.
pub fn refine_with_shadow(
    prediction: &Prediction,
    plan: &PhysicalPlan,
    rates: &RateVector,
    ratios: &RatioTable,
    shadow_duration_s: f64,
    run_shadow: impl FnOnce(&PhysicalPlan, f64) -> Result<MetricsSeries, SimError>,
) -> Result<Prediction, AnalysisError> {
    if !prediction.feasible {
        return Err(AnalysisError::Infeasible);
    }
    let (component, target) = (prediction.component.as_str(), prediction.target.as_str());
    let shadowed = plan.add_shadow(component, target)?;

    let usage = modeled_usage(&shadowed, rates, ratios);
    let site = plan.topology.site(target).expect("add_shadow checked the site");
    let demand = usage.cpu_by_site().get(target).copied().unwrap_or(0.0);
    if site.is_edge() && demand > site.cpu_units + 1e-12 {
        return Err(FabricError::Capacity {
            site: target.to_string(),
            resource: "cpu units",
            demand,
            capacity: site.cpu_units,
        }
        .into());
    }

    let series = run_shadow(&shadowed, shadow_duration_s)?;
    let id = crate::fabric::shadow_id(component);
    let m = series
        .totals
        .node(&id)
        .ok_or_else(|| AnalysisError::MissingMetric(id.clone()))?;
    let msgs_in = rates.components.get(component).map_or(0.0, |r| r.msgs_in);
    let observed_cpu = if m.msgs_in > 0 {
        msgs_in * m.cpu_units_used / m.msgs_in as f64
    } else {
        prediction.cpu_footprint
    };

    let hypothetical = plan.moved(component, target, false)?;
    let mut usage = modeled_usage(&hypothetical, rates, ratios);
    if let Some(e) = usage.entities.get_mut(component) {
        e.cpu_units = observed_cpu;
    }
    let current = cost_of_usage(&plan.topology, &modeled_usage(plan, rates, ratios));
    Ok(prediction_from(
        plan,
        component,
        target,
        &current,
        &hypothetical,
        &usage,
        Confidence::ShadowRefined,
    ))
}
