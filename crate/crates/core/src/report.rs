//! Per-second uplink series: link capacity next to what the controller sent.

use std::io;

use serde::{Deserialize, Serialize};

use crate::fabric::PhysicalPlan;
use crate::metrics::{MetricsCsvError, MetricsSeries};
use crate::topology::bandwidth_at;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub t_s: f64,
    pub cap_bits_s: f64,
    pub sent_bits_s: f64,
    pub backlog_bytes: u64,
    pub codec: String,
    pub batch_window_s: u32,
}

/// Index of the first link whose schedule has more than one step, falling
/// back to link 0.
pub fn replay_link(plan: &PhysicalPlan) -> Option<usize> {
    let links = &plan.topology.links;
    if links.is_empty() {
        return None;
    }
    Some(
        links
            .iter()
            .position(|l| l.bandwidth_schedule.steps.len() > 1)
            .unwrap_or(0),
    )
}

/// One row per metrics window for the uplinks routed over `link`. Sent bits
/// and backlog are summed across those channels; codec and window come from
/// the first channel by id.
pub fn comm_series(plan: &PhysicalPlan, series: &MetricsSeries, link: usize) -> Vec<CommRow> {
    let spec = &plan.topology.links[link];
    let channels: Vec<String> = plan
        .uplinks()
        .filter(|c| c.route.iter().any(|h| h.link == link))
        .map(|c| c.id.clone())
        .collect();
    series
        .windows
        .iter()
        .map(|w| {
            let dur = w.duration_s();
            let mut sent = 0u64;
            let mut backlog = 0u64;
            let mut codec = "-".to_string();
            let mut window = 0;
            for (i, id) in channels.iter().enumerate() {
                if let Some(m) = w.channel(id) {
                    sent += m.bytes_sent_encoded;
                    backlog += m.backlog_bytes;
                    if i == 0 {
                        codec = m.codec.map_or_else(|| "-".to_string(), |c| c.to_string());
                        window = m.batch_window_s;
                    }
                }
            }
            CommRow {
                t_s: w.start_s,
                cap_bits_s: bandwidth_at(spec, w.start_s),
                sent_bits_s: if dur > 0.0 { sent as f64 * 8.0 / dur } else { 0.0 },
                backlog_bytes: backlog,
                codec,
                batch_window_s: window,
            }
        })
        .collect()
}

pub fn write_comm_csv<W: io::Write>(rows: &[CommRow], out: W) -> Result<(), MetricsCsvError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn comm_csv(rows: &[CommRow]) -> String {
    let mut buf = Vec::new();
    write_comm_csv(rows, &mut buf).expect("writing to memory");
    if rows.is_empty() {
        buf.extend_from_slice(b"t_s,cap_bits_s,sent_bits_s,backlog_bytes,codec,batch_window_s\n");
    }
    String::from_utf8(buf).expect("csv output is utf-8")
}

pub fn read_comm_csv<R: io::Read>(input: R) -> Result<Vec<CommRow>, MetricsCsvError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
