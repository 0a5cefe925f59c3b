//! Windowed simulation metrics and their CSV form.
//!
//! Rows are `window_start_s,entity_kind,entity_id,metric,value`, one per
//! window per entity per metric, followed by cumulative totals whose first
//! column is `#TOTAL`.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::CodecId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeClass {
    Source,
    Component,
    Codec,
    Shadow,
    Sink,
}

impl NodeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeClass::Source => "source",
            NodeClass::Component => "component",
            NodeClass::Codec => "codec",
            NodeClass::Shadow => "shadow",
            NodeClass::Sink => "sink",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "source" => NodeClass::Source,
            "component" => NodeClass::Component,
            "codec" => NodeClass::Codec,
            "shadow" => NodeClass::Shadow,
            "sink" => NodeClass::Sink,
            _ => return None,
        })
    }
}

/// Counters for anything that handles messages: sources, logical components,
/// injected codecs, shadows and sinks.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMetrics {
    pub class: NodeClass,
    pub msgs_in: u64,
    pub msgs_out: u64,
    /// CPU unit-seconds actually consumed.
    pub cpu_units_used: f64,
    pub mem_mb: f64,
    /// Messages waiting for CPU at window end.
    pub queue_len: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl NodeMetrics {
    pub fn new(class: NodeClass) -> Self {
        NodeMetrics {
            class,
            msgs_in: 0,
            msgs_out: 0,
            cpu_units_used: 0.0,
            mem_mb: 0.0,
            queue_len: 0,
            bytes_in: 0,
            bytes_out: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelMetrics {
    /// Declared bytes of messages entering the channel.
    pub bytes_offered_raw: u64,
    pub bytes_sent_encoded: u64,
    /// Encoded bytes awaiting transmission plus declared bytes of records
    /// held for longer than one control interval, at window end.
    pub backlog_bytes: u64,
    /// Records accepted but not yet delivered, at window end.
    pub records_queued: u64,
    pub records_delivered: u64,
    pub codec: Option<CodecId>,
    pub batch_window_s: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteMetrics {
    pub cpu_units_used: f64,
    pub cpu_utilization: f64,
    pub mem_utilization: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkMetrics {
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub nodes: BTreeMap<String, NodeMetrics>,
    pub channels: BTreeMap<String, ChannelMetrics>,
    pub sites: BTreeMap<String, SiteMetrics>,
    /// Keyed `from-to` as declared in the topology.
    pub links: BTreeMap<String, LinkMetrics>,
}

impl MetricsWindow {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn node(&self, id: &str) -> Option<&NodeMetrics> {
        self.nodes.get(id)
    }

    pub fn channel(&self, id: &str) -> Option<&ChannelMetrics> {
        self.channels.get(id)
    }

    pub fn records_injected(&self) -> u64 {
        self.nodes
            .values()
            .filter(|n| n.class == NodeClass::Source)
            .map(|n| n.msgs_out)
            .sum()
    }

    pub fn records_at_sinks(&self) -> u64 {
        self.nodes
            .values()
            .filter(|n| n.class == NodeClass::Sink)
            .map(|n| n.msgs_in)
            .sum()
    }

    /// Records still queued at components or channels.
    pub fn records_in_flight(&self) -> u64 {
        let queued: u64 = self
            .nodes
            .values()
            .filter(|n| n.class == NodeClass::Component)
            .map(|n| n.queue_len)
            .sum();
        queued + self.channels.values().map(|c| c.records_queued).sum::<u64>()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsSeries {
    pub windows: Vec<MetricsWindow>,
    pub totals: MetricsWindow,
}

impl MetricsSeries {
    /// Folds windows into cumulative totals: counters add, gauges keep the
    /// last value, utilization becomes the whole-run average.
    pub fn from_windows(windows: Vec<MetricsWindow>, site_cpu_capacity: &BTreeMap<String, f64>) -> Self {
        let mut totals = MetricsWindow {
            start_s: windows.first().map_or(0.0, |w| w.start_s),
            end_s: windows.last().map_or(0.0, |w| w.end_s),
            ..MetricsWindow::default()
        };
        for w in &windows {
            for (id, n) in &w.nodes {
                let t = totals
                    .nodes
                    .entry(id.clone())
                    .or_insert_with(|| NodeMetrics::new(n.class));
                t.msgs_in += n.msgs_in;
                t.msgs_out += n.msgs_out;
                t.cpu_units_used += n.cpu_units_used;
                t.bytes_in += n.bytes_in;
                t.bytes_out += n.bytes_out;
                t.mem_mb = n.mem_mb;
                t.queue_len = n.queue_len;
            }
            for (id, c) in &w.channels {
                let t = totals.channels.entry(id.clone()).or_default();
                t.bytes_offered_raw += c.bytes_offered_raw;
                t.bytes_sent_encoded += c.bytes_sent_encoded;
                t.records_delivered += c.records_delivered;
                t.backlog_bytes = c.backlog_bytes;
                t.records_queued = c.records_queued;
                t.codec = c.codec;
                t.batch_window_s = c.batch_window_s;
            }
            for (id, s) in &w.sites {
                let t = totals.sites.entry(id.clone()).or_default();
                t.cpu_units_used += s.cpu_units_used;
                t.mem_utilization = s.mem_utilization;
            }
            for (id, l) in &w.links {
                let t = totals.links.entry(id.clone()).or_default();
                t.bytes_up += l.bytes_up;
                t.bytes_down += l.bytes_down;
            }
        }
        let span = totals.duration_s();
        for (id, s) in totals.sites.iter_mut() {
            let cap = site_cpu_capacity.get(id).copied().unwrap_or(0.0);
            s.cpu_utilization = if cap > 0.0 && span > 0.0 {
                (s.cpu_units_used / (cap * span)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        MetricsSeries { windows, totals }
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), MetricsCsvError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(HEADER)?;
        for window in &self.windows {
            write_window(&mut w, &window.start_s.to_string(), window)?;
        }
        write_window(&mut w, TOTAL_TAG, &self.totals)?;
        w.flush()?;
        Ok(())
    }

    /// Parses the output of [`MetricsSeries::write_csv`]. Window end times
    /// are recovered from the next window's start and the totals span.
    pub fn from_csv<R: io::Read>(input: R) -> Result<Self, MetricsCsvError> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        if r.headers()?.iter().ne(HEADER) {
            return Err(MetricsCsvError::Format {
                line: 1,
                message: "unexpected header".into(),
            });
        }
        let mut windows: Vec<MetricsWindow> = Vec::new();
        let mut totals: Option<MetricsWindow> = None;
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let line = i as u64 + 2;
            let bad = |message: String| MetricsCsvError::Format { line, message };
            if row.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", row.len())));
            }
            let target = if &row[0] == TOTAL_TAG {
                totals.get_or_insert_with(MetricsWindow::default)
            } else {
                if totals.is_some() {
                    return Err(bad("window row after totals".into()));
                }
                let start: f64 = row[0]
                    .parse()
                    .map_err(|_| bad(format!("bad window start `{}`", &row[0])))?;
                if windows.last().is_none_or(|w| w.start_s != start) {
                    if windows.last().is_some_and(|w| w.start_s > start) {
                        return Err(bad("windows out of order".into()));
                    }
                    windows.push(MetricsWindow {
                        start_s: start,
                        end_s: start,
                        ..MetricsWindow::default()
                    });
                }
                windows.last_mut().expect("pushed above")
            };
            set_metric(target, &row[1], &row[2], &row[3], &row[4]).map_err(bad)?;
        }
        let totals = totals.ok_or(MetricsCsvError::Format {
            line: 0,
            message: "missing totals".into(),
        })?;
        let span_end = totals.end_s;
        let starts: Vec<f64> = windows.iter().skip(1).map(|w| w.start_s).chain([span_end]).collect();
        for (w, end) in windows.iter_mut().zip(starts) {
            w.end_s = end;
        }
        Ok(MetricsSeries { windows, totals })
    }
}

const HEADER: [&str; 5] = ["window_start_s", "entity_kind", "entity_id", "metric", "value"];
const TOTAL_TAG: &str = "#TOTAL";

#[derive(Debug, Error)]
pub enum MetricsCsvError {
    #[error("metrics csv line {line}: {message}")]
    Format { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn write_window<W: io::Write>(w: &mut csv::Writer<W>, tag: &str, window: &MetricsWindow) -> Result<(), csv::Error> {
    let mut row = |kind: &str, id: &str, metric: &str, value: String| w.write_record([tag, kind, id, metric, &value]);
    if tag == TOTAL_TAG {
        row("run", "run", "start_s", window.start_s.to_string())?;
        row("run", "run", "end_s", window.end_s.to_string())?;
    }
    for (id, n) in &window.nodes {
        let kind = n.class.as_str();
        row(kind, id, "msgs_in", n.msgs_in.to_string())?;
        row(kind, id, "msgs_out", n.msgs_out.to_string())?;
        row(kind, id, "cpu_units_used", n.cpu_units_used.to_string())?;
        row(kind, id, "mem_mb", n.mem_mb.to_string())?;
        row(kind, id, "queue_len", n.queue_len.to_string())?;
        row(kind, id, "bytes_in", n.bytes_in.to_string())?;
        row(kind, id, "bytes_out", n.bytes_out.to_string())?;
    }
    for (id, c) in &window.channels {
        row("channel", id, "bytes_offered_raw", c.bytes_offered_raw.to_string())?;
        row("channel", id, "bytes_sent_encoded", c.bytes_sent_encoded.to_string())?;
        row("channel", id, "sent_bits", (c.bytes_sent_encoded * 8).to_string())?;
        row("channel", id, "backlog_bytes", c.backlog_bytes.to_string())?;
        row("channel", id, "records_queued", c.records_queued.to_string())?;
        row("channel", id, "records_delivered", c.records_delivered.to_string())?;
        row(
            "channel",
            id,
            "codec",
            c.codec.map_or_else(|| "-".to_string(), |c| c.to_string()),
        )?;
        row("channel", id, "batch_window_s", c.batch_window_s.to_string())?;
    }
    for (id, s) in &window.sites {
        row("site", id, "cpu_units_used", s.cpu_units_used.to_string())?;
        row("site", id, "cpu_utilization", s.cpu_utilization.to_string())?;
        row("site", id, "mem_utilization", s.mem_utilization.to_string())?;
    }
    for (id, l) in &window.links {
        row("link", id, "bytes_up", l.bytes_up.to_string())?;
        row("link", id, "bytes_down", l.bytes_down.to_string())?;
    }
    Ok(())
}

fn num<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value `{value}`"))
}

fn set_metric(w: &mut MetricsWindow, kind: &str, id: &str, metric: &str, value: &str) -> Result<(), String> {
    let unknown = || format!("unknown metric `{kind}.{metric}`");
    if let Some(class) = NodeClass::parse(kind) {
        let n = w.nodes.entry(id.to_string()).or_insert_with(|| NodeMetrics::new(class));
        match metric {
            "msgs_in" => n.msgs_in = num(value)?,
            "msgs_out" => n.msgs_out = num(value)?,
            "cpu_units_used" => n.cpu_units_used = num(value)?,
            "mem_mb" => n.mem_mb = num(value)?,
            "queue_len" => n.queue_len = num(value)?,
            "bytes_in" => n.bytes_in = num(value)?,
            "bytes_out" => n.bytes_out = num(value)?,
            _ => return Err(unknown()),
        }
        return Ok(());
    }
    match kind {
        "run" => match metric {
            "start_s" => w.start_s = num(value)?,
            "end_s" => w.end_s = num(value)?,
            _ => return Err(unknown()),
        },
        "channel" => {
            let c = w.channels.entry(id.to_string()).or_default();
            match metric {
                "bytes_offered_raw" => c.bytes_offered_raw = num(value)?,
                "bytes_sent_encoded" => c.bytes_sent_encoded = num(value)?,
                "sent_bits" => {}
                "backlog_bytes" => c.backlog_bytes = num(value)?,
                "records_queued" => c.records_queued = num(value)?,
                "records_delivered" => c.records_delivered = num(value)?,
                "codec" => c.codec = if value == "-" { None } else { Some(num(value)?) },
                "batch_window_s" => c.batch_window_s = num(value)?,
                _ => return Err(unknown()),
            }
        }
        "site" => {
            let s = w.sites.entry(id.to_string()).or_default();
            match metric {
                "cpu_units_used" => s.cpu_units_used = num(value)?,
                "cpu_utilization" => s.cpu_utilization = num(value)?,
                "mem_utilization" => s.mem_utilization = num(value)?,
                _ => return Err(unknown()),
            }
        }
        "link" => {
            let l = w.links.entry(id.to_string()).or_default();
            match metric {
                "bytes_up" => l.bytes_up = num(value)?,
                "bytes_down" => l.bytes_down = num(value)?,
                _ => return Err(unknown()),
            }
        }
        _ => return Err(format!("unknown entity kind `{kind}`")),
    }
    Ok(())
}

impl fmt::Display for MetricsSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}
