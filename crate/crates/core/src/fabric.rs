//! Compiles a logical spec plus a placement into a physical plan.
//!
//! Every DAG edge whose endpoints sit on different sites becomes an uplink
//! channel with an injected encoder on the sending site, a decoder on the
//! receiving site, and its own communication controller. Plans are immutable
//! values; moves and shadows produce new plans.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logical::{validate_with_topology, LogicalSpec, NodeKind};
use crate::topology::{Direction, Topology};

/// Node id to site id, for sources, components and sinks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement(pub BTreeMap<String, String>);

impl Placement {
    pub fn get(&self, id: &str) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn set(&mut self, id: impl Into<String>, site: impl Into<String>) {
        self.0.insert(id.into(), site.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn from_json(text: &str) -> Result<Self, crate::logical::ParseError> {
        crate::logical::parse_json_document(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serialization is infallible")
    }

    /// Adds the fixed sites of sources and sinks that the map leaves out.
    pub fn with_fixed_nodes(mut self, spec: &LogicalSpec) -> Self {
        for s in &spec.sources {
            self.0.entry(s.id.clone()).or_insert_with(|| s.site_id.clone());
        }
        for k in &spec.sinks {
            self.0.entry(k.id.clone()).or_insert_with(|| k.site_id.clone());
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Local,
    Uplink,
}

/// One link traversal of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hop {
    pub link: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub id: String,
    pub edge: (String, String),
    pub kind: ChannelKind,
    pub from_site: String,
    pub to_site: String,
    /// Empty for local channels; two hops when relayed edge to edge.
    pub route: Vec<Hop>,
    pub controller: Option<String>,
}

impl Channel {
    pub fn is_uplink(&self) -> bool {
        self.kind == ChannelKind::Uplink
    }

    pub fn encoder_id(&self) -> String {
        format!("enc:{}", self.id)
    }

    pub fn decoder_id(&self) -> String {
        format!("dec:{}", self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecRole {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecComponent {
    pub id: String,
    pub channel: String,
    pub site: String,
    pub role: CodecRole,
}

impl CodecComponent {
    /// Per-message CPU demand when running `codec`, before speed scaling.
    pub fn cpu_units_per_msg(&self, topology: &Topology, codec: crate::codec::CodecId) -> f64 {
        match self.role {
            CodecRole::Encoder => topology.codec_cpu.encoder(codec),
            CodecRole::Decoder => topology.codec_cpu.decoder(codec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shadow {
    pub component: String,
    pub site: String,
}

impl Shadow {
    pub fn id(&self) -> String {
        shadow_id(&self.component)
    }
}

pub fn shadow_id(component: &str) -> String {
    format!("shadow:{component}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalPlan {
    pub spec: Arc<LogicalSpec>,
    pub topology: Arc<Topology>,
    pub placement: Placement,
    pub channels: Vec<Channel>,
    pub injected: Vec<CodecComponent>,
    pub shadows: Vec<Shadow>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FabricError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("capacity error: site `{site}` needs {demand} {resource} but has {capacity}")]
    Capacity {
        site: String,
        resource: &'static str,
        demand: f64,
        capacity: f64,
    },
    #[error("component `{0}` already has a shadow")]
    ShadowExists(String),
    #[error("component `{0}` has no shadow")]
    NoShadow(String),
}

pub fn compile(
    spec: impl Into<Arc<LogicalSpec>>,
    topology: impl Into<Arc<Topology>>,
    placement: &Placement,
) -> Result<PhysicalPlan, FabricError> {
    let spec = spec.into();
    let topology = topology.into();
    let report = validate_with_topology(&spec, &topology);
    if !report.is_ok() {
        return Err(FabricError::InvalidSpec(report.to_string().trim_end().to_string()));
    }
    build(spec, topology, placement.clone(), Vec::new(), true)
}

/// Like [`compile`] on an already validated spec, optionally skipping the
/// memory check. Used for what-if evaluation of hypothetical placements.
pub(crate) fn build(
    spec: Arc<LogicalSpec>,
    topology: Arc<Topology>,
    placement: Placement,
    shadows: Vec<Shadow>,
    check_capacity: bool,
) -> Result<PhysicalPlan, FabricError> {
    let placement = placement.with_fixed_nodes(&spec);
    check_placement(&spec, &topology, &placement)?;

    let mut channels = Vec::with_capacity(spec.edges.len());
    let mut injected = Vec::new();
    for (from, to) in &spec.edges {
        let from_site = placement.get(from).expect("placement checked").to_string();
        let to_site = placement.get(to).expect("placement checked").to_string();
        let id = format!("{from}->{to}");
        let route = topology
            .route(&from_site, &to_site)
            .ok_or_else(|| FabricError::Placement(format!("no route from `{from_site}` to `{to_site}`")))?
            .into_iter()
            .map(|(link, direction)| Hop { link, direction })
            .collect::<Vec<_>>();
        let kind = if from_site == to_site {
            ChannelKind::Local
        } else {
            ChannelKind::Uplink
        };
        let channel = Channel {
            controller: (kind == ChannelKind::Uplink).then(|| format!("ctl:{id}")),
            id,
            edge: (from.clone(), to.clone()),
            kind,
            from_site,
            to_site,
            route,
        };
        if channel.is_uplink() {
            injected.push(CodecComponent {
                id: channel.encoder_id(),
                channel: channel.id.clone(),
                site: channel.from_site.clone(),
                role: CodecRole::Encoder,
            });
            injected.push(CodecComponent {
                id: channel.decoder_id(),
                channel: channel.id.clone(),
                site: channel.to_site.clone(),
                role: CodecRole::Decoder,
            });
        }
        channels.push(channel);
    }

    for s in &shadows {
        if topology.site(&s.site).is_none() {
            return Err(FabricError::Placement(format!("unknown site `{}`", s.site)));
        }
    }

    let plan = PhysicalPlan {
        spec,
        topology,
        placement,
        channels,
        injected,
        shadows,
    };
    if check_capacity {
        plan.check_memory()?;
    }
    Ok(plan)
}

fn check_placement(spec: &LogicalSpec, topology: &Topology, placement: &Placement) -> Result<(), FabricError> {
    for (id, site) in placement.iter() {
        let kind = spec
            .node_kind(id)
            .ok_or_else(|| FabricError::Placement(format!("placement names unknown node `{id}`")))?;
        if topology.site(site).is_none() {
            return Err(FabricError::Placement(format!(
                "`{id}` placed on unknown site `{site}`"
            )));
        }
        match kind {
            NodeKind::Source => {
                let want = &spec.source(id).expect("kind checked").site_id;
                if want != site {
                    return Err(FabricError::Placement(format!("source `{id}` must stay at `{want}`")));
                }
            }
            NodeKind::Sink => {
                let want = &spec.sink(id).expect("kind checked").site_id;
                if want != site {
                    return Err(FabricError::Placement(format!("sink `{id}` must stay at `{want}`")));
                }
            }
            NodeKind::Component => {
                if let Some(pin) = &spec.component(id).expect("kind checked").pinned_site {
                    if pin != site {
                        return Err(FabricError::Placement(format!("component `{id}` is pinned to `{pin}`")));
                    }
                }
            }
        }
    }
    if let Some(c) = spec.components.iter().find(|c| placement.get(&c.id).is_none()) {
        return Err(FabricError::Placement(format!("component `{}` has no placement", c.id)));
    }
    Ok(())
}

impl PhysicalPlan {
    pub fn site_of(&self, id: &str) -> Option<&str> {
        if let Some(site) = self.placement.get(id) {
            return Some(site);
        }
        if let Some(c) = self.injected.iter().find(|c| c.id == id) {
            return Some(&c.site);
        }
        self.shadows.iter().find(|s| s.id() == id).map(|s| s.site.as_str())
    }

    pub fn channel(&self, id: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn uplinks(&self) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(|c| c.is_uplink())
    }

    pub fn shadow_of(&self, component: &str) -> Option<&Shadow> {
        self.shadows.iter().find(|s| s.component == component)
    }

    /// Static memory demand per site: logical components plus shadows.
    pub fn memory_by_site(&self) -> BTreeMap<&str, f64> {
        let mut used: BTreeMap<&str, f64> = BTreeMap::new();
        for c in &self.spec.components {
            let site = self.placement.get(&c.id).expect("compiled plans place every component");
            *used.entry(site).or_default() += c.mem_mb;
        }
        for s in &self.shadows {
            let mem = self.spec.component(&s.component).map_or(0.0, |c| c.mem_mb);
            *used.entry(s.site.as_str()).or_default() += mem;
        }
        used
    }

    fn check_memory(&self) -> Result<(), FabricError> {
        for (site_id, demand) in self.memory_by_site() {
            let site = self.topology.site(site_id).expect("placement checked");
            if demand > site.mem_mb {
                return Err(FabricError::Capacity {
                    site: site_id.to_string(),
                    resource: "MiB",
                    demand,
                    capacity: site.mem_mb,
                });
            }
        }
        Ok(())
    }

    fn check_movable(&self, component: &str, target: &str) -> Result<(), FabricError> {
        match self.spec.node_kind(component) {
            Some(NodeKind::Component) => {}
            Some(_) => return Err(FabricError::Placement(format!("`{component}` is a source or sink"))),
            None => return Err(FabricError::Placement(format!("unknown component `{component}`"))),
        }
        if self
            .spec
            .component(component)
            .and_then(|c| c.pinned_site.as_ref())
            .is_some()
        {
            return Err(FabricError::Placement(format!("component `{component}` is pinned")));
        }
        if self.topology.site(target).is_none() {
            return Err(FabricError::Placement(format!("unknown site `{target}`")));
        }
        Ok(())
    }

    pub fn apply_move(&self, component: &str, target: &str) -> Result<PhysicalPlan, FabricError> {
        self.moved(component, target, true)
    }

    pub(crate) fn moved(
        &self,
        component: &str,
        target: &str,
        check_capacity: bool,
    ) -> Result<PhysicalPlan, FabricError> {
        self.check_movable(component, target)?;
        if self.placement.get(component) == Some(target) {
            return Ok(self.clone());
        }
        let mut placement = self.placement.clone();
        placement.set(component, target);
        let shadows = self
            .shadows
            .iter()
            .filter(|s| !(s.component == component && s.site == target))
            .cloned()
            .collect();
        build(
            self.spec.clone(),
            self.topology.clone(),
            placement,
            shadows,
            check_capacity,
        )
    }

    pub fn add_shadow(&self, component: &str, target: &str) -> Result<PhysicalPlan, FabricError> {
        self.check_movable(component, target)?;
        if self.shadow_of(component).is_some() {
            return Err(FabricError::ShadowExists(component.to_string()));
        }
        let mut plan = self.clone();
        plan.shadows.push(Shadow {
            component: component.to_string(),
            site: target.to_string(),
        });
        plan.check_memory()?;
        Ok(plan)
    }

    pub fn remove_shadow(&self, component: &str) -> Result<PhysicalPlan, FabricError> {
        let mut plan = self.clone();
        let before = plan.shadows.len();
        plan.shadows.retain(|s| s.component != component);
        if plan.shadows.len() == before {
            return Err(FabricError::NoShadow(component.to_string()));
        }
        Ok(plan)
    }

    fn link_name(&self, hop: &Hop) -> String {
        let link = &self.topology.links[hop.link];
        format!("{}-{}({})", link.from, link.to, hop.direction)
    }

    /// Deterministic text report: what runs where, channels, injected codecs.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "plan {}", self.spec.name);
        let mut by_site: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        for site in &self.topology.sites {
            by_site.entry(site.id.as_str()).or_default();
        }
        for (id, site) in self.placement.iter() {
            by_site.entry(site).or_default().insert(id.to_string());
        }
        for c in &self.injected {
            by_site.entry(c.site.as_str()).or_default().insert(c.id.clone());
        }
        for s in &self.shadows {
            by_site.entry(s.site.as_str()).or_default().insert(s.id());
        }
        out.push_str("sites:\n");
        for (site, ids) in &by_site {
            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
            let _ = writeln!(out, "  {site}: {}", ids.join(" "));
        }
        out.push_str("channels:\n");
        for c in &self.channels {
            match c.kind {
                ChannelKind::Local => {
                    let _ = writeln!(out, "  {} local @{}", c.id, c.from_site);
                }
                ChannelKind::Uplink => {
                    let hops: Vec<String> = c.route.iter().map(|h| self.link_name(h)).collect();
                    let _ = writeln!(
                        out,
                        "  {} uplink {} -> {} via {}",
                        c.id,
                        c.from_site,
                        c.to_site,
                        hops.join(" ")
                    );
                }
            }
        }
        out.push_str("injected:\n");
        for c in &self.injected {
            let role = match c.role {
                CodecRole::Encoder => "encoder",
                CodecRole::Decoder => "decoder",
            };
            let _ = writeln!(out, "  {} {role} @{}", c.id, c.site);
        }
        if !self.shadows.is_empty() {
            out.push_str("shadows:\n");
            for s in &self.shadows {
                let _ = writeln!(out, "  {} @{}", s.id(), s.site);
            }
        }
        out
    }
}

impl fmt::Display for PhysicalPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}
