//! Sites (edge devices and the cloud), their capacities and pricing, and the
//! edge-to-cloud links with their bandwidth schedules.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecCpuTable;
use crate::logical::{parse_json_document, ParseError};

/// Cloud capacity must be at least this large to count as unbounded.
pub const UNBOUNDED_CPU: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteType {
    Edge,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionedUnit {
    pub unit_name: String,
    pub units: u64,
    pub per_unit_hour: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingTable {
    #[serde(default)]
    pub per_cpu_unit_second: f64,
    #[serde(default)]
    pub per_million_invocations: f64,
    #[serde(default)]
    pub per_gb_ingress: f64,
    #[serde(default)]
    pub per_gb_storage_write: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provisioned_unit: Option<ProvisionedUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub id: String,
    pub site_type: SiteType,
    /// Reference-core-seconds per second.
    pub cpu_units: f64,
    pub mem_mb: f64,
    /// Per-core speed relative to the reference core, as known to the cost model.
    pub speed_factor: f64,
    /// Speed the simulator actually runs at. Defaults to `speed_factor`; set it
    /// to model a site whose declared profile is wrong.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_speed_factor: Option<f64>,
    #[serde(default)]
    pub pricing: PricingTable,
}

impl Site {
    pub fn true_speed(&self) -> f64 {
        self.actual_speed_factor.unwrap_or(self.speed_factor)
    }

    pub fn is_edge(&self) -> bool {
        self.site_type == SiteType::Edge
    }
}

/// Right-continuous step function of link capacity over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BandwidthSchedule {
    /// `(start_second, cap_bits_per_s)` pairs.
    pub steps: Vec<(f64, f64)>,
}

impl BandwidthSchedule {
    pub fn constant(cap_bits_per_s: f64) -> Self {
        Self {
            steps: vec![(0.0, cap_bits_per_s)],
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        let idx = self.steps.partition_point(|&(start, _)| start <= t);
        self.steps[idx.saturating_sub(1)].1
    }

    fn check(&self) -> Result<(), String> {
        let Some(&(first, _)) = self.steps.first() else {
            return Err("bandwidth schedule is empty".into());
        };
        if first != 0.0 {
            return Err("bandwidth schedule must start at second 0".into());
        }
        for w in self.steps.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err("bandwidth schedule start seconds must be strictly increasing".into());
            }
        }
        if let Some(&(t, cap)) = self.steps.iter().find(|&&(_, cap)| !(cap >= 1.0) || !cap.is_finite()) {
            return Err(format!("cap {cap} at second {t} must be at least 1 bit/s"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub from: String,
    pub to: String,
    pub bandwidth_schedule: BandwidthSchedule,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default)]
    pub per_gb_cost: f64,
}

pub fn bandwidth_at(link: &LinkSpec, t: f64) -> f64 {
    link.bandwidth_schedule.at(t)
}

/// Traffic direction over an edge-cloud link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Edge to cloud.
    Up,
    /// Cloud to edge.
    Down,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub sites: Vec<Site>,
    pub links: Vec<LinkSpec>,
    #[serde(default, skip_serializing_if = "CodecCpuTable::is_default")]
    pub codec_cpu: CodecCpuTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InvariantCode {
    NoCloud,
    MultipleCloud,
    DupSite,
    BadSite,
    BadLink,
    MissingUplink,
    BadSchedule,
}

impl fmt::Display for InvariantCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvariantCode::NoCloud => "NO_CLOUD",
            InvariantCode::MultipleCloud => "MULTIPLE_CLOUD",
            InvariantCode::DupSite => "DUP_SITE",
            InvariantCode::BadSite => "BAD_SITE",
            InvariantCode::BadLink => "BAD_LINK",
            InvariantCode::MissingUplink => "MISSING_UPLINK",
            InvariantCode::BadSchedule => "BAD_SCHEDULE",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{code}: {message}")]
    Invariant { code: InvariantCode, message: String },
}

impl TopologyError {
    pub fn code(&self) -> Option<InvariantCode> {
        match self {
            TopologyError::Invariant { code, .. } => Some(*code),
            TopologyError::Parse(_) => None,
        }
    }
}

fn invariant(code: InvariantCode, message: impl Into<String>) -> TopologyError {
    TopologyError::Invariant {
        code,
        message: message.into(),
    }
}

pub fn parse_topology(text: &str) -> Result<Topology, TopologyError> {
    let topology: Topology = parse_json_document(text)?;
    topology.check()?;
    Ok(topology)
}

impl Topology {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serialization is infallible")
    }

    pub fn check(&self) -> Result<(), TopologyError> {
        let mut ids = HashSet::new();
        for site in &self.sites {
            if !ids.insert(site.id.as_str()) {
                return Err(invariant(
                    InvariantCode::DupSite,
                    format!("site `{}` declared twice", site.id),
                ));
            }
            if !(site.cpu_units > 0.0) || !(site.speed_factor > 0.0) || !(site.mem_mb >= 0.0) {
                return Err(invariant(
                    InvariantCode::BadSite,
                    format!("site `{}` needs cpu_units > 0, speed_factor > 0, mem_mb >= 0", site.id),
                ));
            }
            if site.actual_speed_factor.is_some_and(|s| !(s > 0.0)) {
                return Err(invariant(
                    InvariantCode::BadSite,
                    format!("site `{}` actual_speed_factor must be > 0", site.id),
                ));
            }
            match site.site_type {
                SiteType::Edge if !site.cpu_units.is_finite() || !site.mem_mb.is_finite() => {
                    return Err(invariant(
                        InvariantCode::BadSite,
                        format!("edge site `{}` must have finite capacity", site.id),
                    ));
                }
                SiteType::Cloud if site.cpu_units < UNBOUNDED_CPU => {
                    return Err(invariant(
                        InvariantCode::BadSite,
                        format!("cloud site `{}` cpu_units must be >= {UNBOUNDED_CPU}", site.id),
                    ));
                }
                _ => {}
            }
        }
        let clouds: Vec<&Site> = self.sites.iter().filter(|s| s.site_type == SiteType::Cloud).collect();
        let cloud = match clouds.as_slice() {
            [] => return Err(invariant(InvariantCode::NoCloud, "topology has no cloud site")),
            [one] => *one,
            _ => {
                return Err(invariant(
                    InvariantCode::MultipleCloud,
                    "topology has more than one cloud site",
                ))
            }
        };
        for link in &self.links {
            if link.from == link.to {
                return Err(invariant(
                    InvariantCode::BadLink,
                    format!("link `{}` loops to itself", link.from),
                ));
            }
            for end in [&link.from, &link.to] {
                if !ids.contains(end.as_str()) {
                    return Err(invariant(
                        InvariantCode::BadLink,
                        format!("link names unknown site `{end}`"),
                    ));
                }
            }
            if link.from != cloud.id && link.to != cloud.id {
                return Err(invariant(
                    InvariantCode::BadLink,
                    format!("link {}-{} does not touch the cloud site", link.from, link.to),
                ));
            }
            if !(link.per_gb_cost >= 0.0) || !(link.latency_ms >= 0.0) {
                return Err(invariant(InvariantCode::BadLink, "link rates must be >= 0"));
            }
            link.bandwidth_schedule.check().map_err(|m| {
                invariant(
                    InvariantCode::BadSchedule,
                    format!("link {}-{}: {m}", link.from, link.to),
                )
            })?;
        }
        for site in self.sites.iter().filter(|s| s.is_edge()) {
            let n = self
                .links
                .iter()
                .filter(|l| (l.from == site.id && l.to == cloud.id) || (l.to == site.id && l.from == cloud.id))
                .count();
            if n != 1 {
                return Err(invariant(
                    InvariantCode::MissingUplink,
                    format!("edge site `{}` has {n} links to the cloud, expected 1", site.id),
                ));
            }
        }
        Ok(())
    }

    pub fn site(&self, id: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.id == id)
    }

    pub fn cloud(&self) -> &Site {
        self.sites
            .iter()
            .find(|s| s.site_type == SiteType::Cloud)
            .expect("validated topology has a cloud site")
    }

    pub fn edge_sites(&self) -> impl Iterator<Item = &Site> {
        self.sites.iter().filter(|s| s.is_edge())
    }

    /// Index of the link joining `edge` to the cloud.
    pub fn uplink_of(&self, edge: &str) -> Option<usize> {
        let cloud = &self.cloud().id;
        self.links
            .iter()
            .position(|l| (l.from == edge && &l.to == cloud) || (l.to == edge && &l.from == cloud))
    }

    /// Link hops a message follows from one site to another. Empty for the
    /// same site; edge-to-edge traffic is relayed through the cloud.
    pub fn route(&self, from: &str, to: &str) -> Option<Vec<(usize, Direction)>> {
        if from == to {
            return Some(Vec::new());
        }
        let a = self.site(from)?;
        let b = self.site(to)?;
        match (a.site_type, b.site_type) {
            (SiteType::Edge, SiteType::Cloud) => Some(vec![(self.uplink_of(from)?, Direction::Up)]),
            (SiteType::Cloud, SiteType::Edge) => Some(vec![(self.uplink_of(to)?, Direction::Down)]),
            (SiteType::Edge, SiteType::Edge) => Some(vec![
                (self.uplink_of(from)?, Direction::Up),
                (self.uplink_of(to)?, Direction::Down),
            ]),
            (SiteType::Cloud, SiteType::Cloud) => None,
        }
    }
}

/// Remaining capacity, floored at zero componentwise.
pub fn edge_headroom(site: &Site, used_cpu: f64, used_mem: f64) -> (f64, f64) {
    ((site.cpu_units - used_cpu).max(0.0), (site.mem_mb - used_mem).max(0.0))
}
