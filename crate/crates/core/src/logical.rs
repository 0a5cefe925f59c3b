//! Declarative application description: sources, components, sinks and the
//! directed acyclic graph connecting them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{SiteType, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogicalSpec {
    pub name: String,
    pub sources: Vec<SourceDecl>,
    pub components: Vec<ComponentDecl>,
    pub sinks: Vec<SinkDecl>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDecl {
    pub id: String,
    pub selector: String,
    pub site_id: String,
    /// Messages per second.
    pub rate: f64,
    pub bytes_per_msg: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    StreamOp,
    MlScorer,
    Aggregator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDecl {
    pub id: String,
    pub kind: ComponentKind,
    /// CPU-seconds of a reference core per input message.
    pub cpu_units_per_msg: f64,
    pub mem_mb: f64,
    /// Output messages per input message.
    pub selectivity: f64,
    pub out_bytes_per_msg: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_site: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkKind {
    Storage,
    Pubsub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkDecl {
    pub id: String,
    pub kind: SinkKind,
    pub site_id: String,
}

/// What kind of graph node an id names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Source,
    Component,
    Sink,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("field error at {path}: {message}")]
    Field { path: String, message: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("precondition violated: {0}")]
pub struct PreconditionError(pub String);

/// Parses a JSON document into `T`, reporting the failing field path.
pub(crate) fn parse_json_document<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ParseError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: Result<T, _> = serde_path_to_error::deserialize(&mut de);
    let value = match parsed {
        Ok(v) => v,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            return Err(classify_json_error(path, inner));
        }
    };
    if let Err(e) = de.end() {
        return Err(ParseError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        });
    }
    Ok(value)
}

fn classify_json_error(path: String, err: serde_json::Error) -> ParseError {
    use serde_json::error::Category;
    match err.classify() {
        Category::Syntax | Category::Eof | Category::Io => ParseError::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        },
        Category::Data => {
            let message = err.to_string();
            // serde reports a missing field against its parent; surface the field itself.
            let path = match missing_field_name(&message) {
                Some(field) if path == "." => field.to_string(),
                Some(field) => format!("{path}.{field}"),
                None => path,
            };
            ParseError::Field { path, message }
        }
    }
}

fn missing_field_name(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

pub fn parse_spec(text: &str) -> Result<LogicalSpec, ParseError> {
    parse_json_document(text)
}

impl LogicalSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization is infallible")
    }

    pub fn node_kind(&self, id: &str) -> Option<NodeKind> {
        if self.sources.iter().any(|s| s.id == id) {
            Some(NodeKind::Source)
        } else if self.components.iter().any(|c| c.id == id) {
            Some(NodeKind::Component)
        } else if self.sinks.iter().any(|s| s.id == id) {
            Some(NodeKind::Sink)
        } else {
            None
        }
    }

    pub fn source(&self, id: &str) -> Option<&SourceDecl> {
        self.sources.iter().find(|s| s.id == id)
    }

    pub fn component(&self, id: &str) -> Option<&ComponentDecl> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn sink(&self, id: &str) -> Option<&SinkDecl> {
        self.sinks.iter().find(|s| s.id == id)
    }

    /// All declared ids: sources, then components, then sinks.
    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.sources
            .iter()
            .map(|s| s.id.as_str())
            .chain(self.components.iter().map(|c| c.id.as_str()))
            .chain(self.sinks.iter().map(|s| s.id.as_str()))
    }

    pub fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(_, to)| to == id)
            .map(|(from, _)| from.as_str())
    }

    pub fn successors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(from, _)| from == id)
            .map(|(_, to)| to.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    Cycle,
    DanglingEdge,
    DupId,
    Unreachable,
    BadPin,
    /// An edge that enters a source or leaves a sink.
    BadDirection,
    /// A numeric field outside its allowed range.
    BadValue,
    /// A source or sink bound to a site of the wrong type.
    BadSite,
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FindingCode::Cycle => "CYCLE",
            FindingCode::DanglingEdge => "DANGLING_EDGE",
            FindingCode::DupId => "DUP_ID",
            FindingCode::Unreachable => "UNREACHABLE",
            FindingCode::BadPin => "BAD_PIN",
            FindingCode::BadDirection => "BAD_DIRECTION",
            FindingCode::BadValue => "BAD_VALUE",
            FindingCode::BadSite => "BAD_SITE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub code: FindingCode,
    /// Ids involved, sorted.
    pub ids: Vec<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, code: FindingCode) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    fn push(&mut self, code: FindingCode, mut ids: Vec<String>, message: String) {
        ids.sort();
        self.findings.push(Finding { code, ids, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.findings.is_empty() {
            return writeln!(f, "OK");
        }
        for finding in &self.findings {
            writeln!(f, "{} [{}] {}", finding.code, finding.ids.join(","), finding.message)?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a spec. Findings are data, never errors.
pub fn validate(spec: &LogicalSpec) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for id in spec.node_ids() {
        *seen.entry(id).or_default() += 1;
    }
    let mut dups: Vec<&str> = seen.iter().filter(|(_, &n)| n > 1).map(|(id, _)| *id).collect();
    dups.sort_unstable();
    for id in dups {
        report.push(
            FindingCode::DupId,
            vec![id.to_string()],
            format!("id `{id}` declared more than once"),
        );
    }

    for s in &spec.sources {
        if !(s.rate >= 0.0) || !s.rate.is_finite() {
            report.push(
                FindingCode::BadValue,
                vec![s.id.clone()],
                "rate must be a finite value >= 0".into(),
            );
        }
        if s.bytes_per_msg < 1 {
            report.push(
                FindingCode::BadValue,
                vec![s.id.clone()],
                "bytes_per_msg must be >= 1".into(),
            );
        }
    }
    for c in &spec.components {
        for (name, v) in [
            ("cpu_units_per_msg", c.cpu_units_per_msg),
            ("mem_mb", c.mem_mb),
            ("selectivity", c.selectivity),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                report.push(
                    FindingCode::BadValue,
                    vec![c.id.clone()],
                    format!("{name} must be a finite value >= 0"),
                );
            }
        }
        if let Some(pin) = &c.pinned_site {
            if pin.is_empty() {
                report.push(FindingCode::BadPin, vec![c.id.clone()], "pinned_site is empty".into());
            }
        }
    }

    let kinds: HashMap<&str, NodeKind> = spec
        .sources
        .iter()
        .map(|s| (s.id.as_str(), NodeKind::Source))
        .chain(spec.components.iter().map(|c| (c.id.as_str(), NodeKind::Component)))
        .chain(spec.sinks.iter().map(|s| (s.id.as_str(), NodeKind::Sink)))
        .collect();

    let mut good_edges: Vec<(&str, &str)> = Vec::new();
    for (from, to) in &spec.edges {
        let missing: Vec<String> = [from, to]
            .into_iter()
            .filter(|id| !kinds.contains_key(id.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            report.push(
                FindingCode::DanglingEdge,
                missing,
                format!("edge ({from},{to}) names an undeclared id"),
            );
            continue;
        }
        if kinds[to.as_str()] == NodeKind::Source {
            report.push(
                FindingCode::BadDirection,
                vec![to.clone()],
                format!("source `{to}` has an in-edge"),
            );
        }
        if kinds[from.as_str()] == NodeKind::Sink {
            report.push(
                FindingCode::BadDirection,
                vec![from.clone()],
                format!("sink `{from}` has an out-edge"),
            );
        }
        good_edges.push((from.as_str(), to.as_str()));
    }

    for cycle in cycles(spec.node_ids(), &good_edges) {
        let msg = format!("cycle through [{}]", cycle.join(","));
        report.push(FindingCode::Cycle, cycle, msg);
    }

    let from_sources = reach(
        spec.sources.iter().map(|s| s.id.as_str()),
        good_edges.iter().map(|&(a, b)| (a, b)),
    );
    let to_sinks = reach(
        spec.sinks.iter().map(|s| s.id.as_str()),
        good_edges.iter().map(|&(a, b)| (b, a)),
    );
    for c in &spec.components {
        let id = c.id.as_str();
        if !from_sources.contains(id) || !to_sinks.contains(id) {
            let why = match (from_sources.contains(id), to_sinks.contains(id)) {
                (false, false) => "is disconnected from every source and sink",
                (false, true) => "is not reachable from any source",
                _ => "does not reach any sink",
            };
            report.push(
                FindingCode::Unreachable,
                vec![c.id.clone()],
                format!("component `{id}` {why}"),
            );
        }
    }

    report
}

/// Validation plus the checks that need a topology: pins, source and sink sites.
pub fn validate_with_topology(spec: &LogicalSpec, topology: &Topology) -> ValidationReport {
    let mut report = validate(spec);
    for s in &spec.sources {
        match topology.site(&s.site_id) {
            Some(site) if site.site_type == SiteType::Edge => {}
            Some(_) => report.push(
                FindingCode::BadSite,
                vec![s.id.clone()],
                format!("source site `{}` is not an edge site", s.site_id),
            ),
            None => report.push(
                FindingCode::BadSite,
                vec![s.id.clone()],
                format!("source site `{}` does not exist", s.site_id),
            ),
        }
    }
    for k in &spec.sinks {
        match topology.site(&k.site_id) {
            Some(site) if site.site_type == SiteType::Cloud => {}
            _ => report.push(
                FindingCode::BadSite,
                vec![k.id.clone()],
                format!("sink site `{}` is not the cloud site", k.site_id),
            ),
        }
    }
    for c in &spec.components {
        if let Some(pin) = &c.pinned_site {
            if !pin.is_empty() && topology.site(pin).is_none() {
                report.push(
                    FindingCode::BadPin,
                    vec![c.id.clone()],
                    format!("pinned site `{pin}` does not exist"),
                );
            }
        }
    }
    report
}

fn cycles<'a>(ids: impl Iterator<Item = &'a str>, edges: &[(&'a str, &'a str)]) -> Vec<Vec<String>> {
    let mut graph: DiGraph<&str, ()> = DiGraph::new();
    let mut index = BTreeMap::new();
    for id in ids {
        index.entry(id).or_insert_with(|| graph.add_node(id));
    }
    for &(a, b) in edges {
        graph.add_edge(index[a], index[b], ());
    }
    let mut out: Vec<Vec<String>> = tarjan_scc(&graph)
        .into_iter()
        .filter(|scc| scc.len() > 1 || graph.contains_edge(scc[0], scc[0]))
        .map(|scc| {
            let mut ids: Vec<String> = scc.iter().map(|&n| graph[n].to_string()).collect();
            ids.sort();
            ids
        })
        .collect();
    out.sort();
    out
}

fn reach<'a>(
    starts: impl Iterator<Item = &'a str>,
    edges: impl Iterator<Item = (&'a str, &'a str)>,
) -> HashSet<&'a str> {
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
    }
    let mut seen: HashSet<&str> = HashSet::new();
    let mut stack: Vec<&str> = starts.collect();
    while let Some(n) = stack.pop() {
        if seen.insert(n) {
            if let Some(next) = adj.get(n) {
                stack.extend(next.iter().copied());
            }
        }
    }
    seen
}

/// Kahn's algorithm with the lexicographically smallest ready id taken first.
pub fn topological_order(spec: &LogicalSpec) -> Result<Vec<String>, PreconditionError> {
    let ids: BTreeSet<&str> = spec.node_ids().collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|&id| (id, 0)).collect();
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (from, to) in &spec.edges {
        if !ids.contains(from.as_str()) || !ids.contains(to.as_str()) {
            return Err(PreconditionError(format!("edge ({from},{to}) names an undeclared id")));
        }
        adj.entry(from.as_str()).or_default().push(to.as_str());
        *indegree.get_mut(to.as_str()).expect("checked above") += 1;
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        for &next in adj.get(id).map(Vec::as_slice).unwrap_or_default() {
            let d = indegree.get_mut(next).expect("declared");
            *d -= 1;
            if *d == 0 {
                ready.insert(next);
            }
        }
    }
    if order.len() != ids.len() {
        return Err(PreconditionError("the edge relation contains a cycle".into()));
    }
    Ok(order)
}
