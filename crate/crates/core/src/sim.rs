//! Fixed-tick simulation of a physical plan.
//!
//! Each tick injects due source records, runs components in topological
//! order against their site's CPU budget, invokes channel controllers on
//! control-interval boundaries, pushes encoded bytes through per-link token
//! buckets and accumulates metrics. Everything is deterministic: the only
//! randomness is the selectivity phase per component, drawn from the seed.

use std::collections::{BTreeMap, VecDeque};
use std::iter::Peekable;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode, CodecId};
use crate::comm::{ChannelParams, ControllerState, PendingRecord};
use crate::fabric::{shadow_id, Hop, PhysicalPlan};
use crate::logical::topological_order;
use crate::metrics::{ChannelMetrics, LinkMetrics, MetricsSeries, MetricsWindow, NodeClass, NodeMetrics, SiteMetrics};
use crate::topology::{bandwidth_at, Direction, Topology};
use crate::workload::Record;

/// Largest unit handed to a token bucket at once.
pub const SEGMENT_BYTES: u64 = 1500;

const SELECTIVITY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default = "default_control_interval_ms")]
    pub control_interval_ms: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_metrics_window_s")]
    pub metrics_window_s: f64,
}

fn default_tick_ms() -> u64 {
    100
}
fn default_control_interval_ms() -> u64 {
    1000
}
fn default_metrics_window_s() -> f64 {
    10.0
}

impl SimConfig {
    pub fn new(duration_s: f64, seed: u64) -> Self {
        SimConfig {
            tick_ms: default_tick_ms(),
            control_interval_ms: default_control_interval_ms(),
            duration_s,
            seed,
            metrics_window_s: default_metrics_window_s(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, crate::logical::ParseError> {
        crate::logical::parse_json_document(text)
    }

    fn ms_multiple(&self, what: &str, seconds: f64) -> Result<u64, SimError> {
        let ms = seconds * 1000.0;
        if !(ms.is_finite() && ms > 0.0) || ms.fract() != 0.0 {
            return Err(SimError::Config(format!(
                "{what} must be a positive whole number of milliseconds"
            )));
        }
        let ms = ms as u64;
        if !ms.is_multiple_of(self.tick_ms) {
            return Err(SimError::Config(format!("{what} must be a multiple of tick_ms")));
        }
        Ok(ms)
    }

    pub fn check(&self) -> Result<(), SimError> {
        if self.tick_ms == 0 || self.control_interval_ms == 0 {
            return Err(SimError::Config(
                "tick_ms and control_interval_ms must be positive".into(),
            ));
        }
        if !self.control_interval_ms.is_multiple_of(self.tick_ms) {
            return Err(SimError::Config(
                "control_interval_ms must be a multiple of tick_ms".into(),
            ));
        }
        self.ms_multiple("duration_s", self.duration_s)?;
        self.ms_multiple("metrics_window_s", self.metrics_window_s)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("workload names `{0}`, which is not a source of the spec")]
    UnknownSource(String),
    #[error("workload goes back in time at {timestamp_ms} ms")]
    UnsortedWorkload { timestamp_ms: u64 },
    #[error("codec failure on channel `{channel}`: {message}")]
    Codec { channel: String, message: String },
}

impl SimError {
    /// True for errors caused by bad inputs rather than broken internals.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, SimError::Codec { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransmitOutcome {
    Sent,
    SentOvershoot,
    Deferred,
}

/// Rate limiter for one direction of a link. Capacity is two seconds of
/// traffic at the current cap; head-of-line payloads may borrow down to
/// minus one capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBucket {
    pub capacity_bits: f64,
    pub tokens_bits: f64,
}

impl TokenBucket {
    pub fn full(cap_bits_per_s: f64) -> Self {
        let capacity_bits = 2.0 * cap_bits_per_s;
        TokenBucket {
            capacity_bits,
            tokens_bits: capacity_bits,
        }
    }

    pub fn refill(&mut self, cap_bits_per_s: f64, dt_s: f64) {
        self.capacity_bits = 2.0 * cap_bits_per_s;
        self.tokens_bits = (self.tokens_bits + cap_bits_per_s * dt_s).min(self.capacity_bits);
    }

    pub fn outcome(&self, payload_bits: f64, head_of_line: bool) -> TransmitOutcome {
        if self.tokens_bits >= payload_bits {
            TransmitOutcome::Sent
        } else if head_of_line && self.tokens_bits > 0.0 {
            TransmitOutcome::SentOvershoot
        } else {
            TransmitOutcome::Deferred
        }
    }

    fn apply(&mut self, outcome: TransmitOutcome, payload_bits: f64) {
        match outcome {
            TransmitOutcome::Sent => self.tokens_bits -= payload_bits,
            TransmitOutcome::SentOvershoot => {
                self.tokens_bits = (self.tokens_bits - payload_bits).max(-self.capacity_bits);
            }
            TransmitOutcome::Deferred => {}
        }
    }
}

pub fn transmit(bucket: &mut TokenBucket, payload_bits: f64, head_of_line: bool) -> TransmitOutcome {
    let outcome = bucket.outcome(payload_bits, head_of_line);
    bucket.apply(outcome, payload_bits);
    outcome
}

/// Per-component phase in `[0, 1)` used by selectivity rounding.
pub fn selectivity_phases(spec: &crate::logical::LogicalSpec, seed: u64) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SELECTIVITY_STREAM);
    let mut ids: Vec<&str> = spec.components.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| (id.to_string(), (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64))
        .collect()
}

/// Cumulative outputs after `n_in` inputs at the given selectivity.
pub fn rounded_outputs(n_in: u64, selectivity: f64, phase: f64) -> u64 {
    (n_in as f64 * selectivity + phase).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Source,
    Component,
    Shadow,
    Sink,
}

#[derive(Debug, Clone)]
struct NodeRt {
    id: String,
    role: Role,
    site: usize,
    /// Actual CPU unit-seconds per message at this site.
    cost: f64,
    selectivity: f64,
    phase: f64,
    n_in: u64,
    n_out: u64,
    queue: VecDeque<Record>,
    out_channels: Vec<usize>,
    shadow: Option<usize>,
    mem_mb: f64,
    metrics: NodeMetrics,
}

#[derive(Debug, Clone)]
struct UplinkRt {
    ctl: ControllerState,
    inbox: Vec<PendingRecord>,
    hops: Vec<Hop>,
    enc_id: String,
    dec_id: String,
    enc_site: usize,
    dec_site: usize,
    budget_bits: f64,
    enc_cpu_interval: f64,
    enc_cpu_prev: f64,
}

#[derive(Debug, Clone)]
struct ChannelRt {
    id: String,
    to: usize,
    declared: u64,
    uplink: Option<UplinkRt>,
    metrics: ChannelMetrics,
}

#[derive(Debug, Clone, Default)]
struct SiteRt {
    budget: f64,
    used_window: f64,
    used_interval: f64,
    used_prev: f64,
}

/// A running simulation. Use [`run`] for the common whole-run case.
pub struct Simulation<I: Iterator<Item = (String, Record)>> {
    plan: PhysicalPlan,
    config: SimConfig,
    workload: Peekable<I>,
    now_ms: u64,
    end_ms: u64,
    window_ms: u64,
    window_start_ms: u64,
    last_ts: u64,
    phases: BTreeMap<String, f64>,
    nodes: Vec<NodeRt>,
    node_index: BTreeMap<String, usize>,
    order: Vec<usize>,
    channels: Vec<ChannelRt>,
    sites: Vec<SiteRt>,
    buckets: Vec<TokenBucket>,
    share: Vec<u32>,
    codec_metrics: BTreeMap<String, NodeMetrics>,
    link_metrics: Vec<LinkMetrics>,
    windows: Vec<MetricsWindow>,
}

fn bucket_slot(hop: &Hop) -> usize {
    hop.link * 2 + usize::from(hop.direction == Direction::Down)
}

fn site_index(topology: &Topology, id: &str) -> usize {
    topology
        .sites
        .iter()
        .position(|s| s.id == id)
        .expect("compiled plans reference known sites")
}

impl<I: Iterator<Item = (String, Record)>> Simulation<I> {
    pub fn new(plan: &PhysicalPlan, workload: I, config: &SimConfig) -> Result<Self, SimError> {
        config.check()?;
        let topology = plan.topology.clone();
        let end_ms = (config.duration_s * 1000.0) as u64;
        let window_ms = (config.metrics_window_s * 1000.0) as u64;
        let buckets = (0..topology.links.len() * 2)
            .map(|slot| TokenBucket::full(bandwidth_at(&topology.links[slot / 2], 0.0)))
            .collect();
        let mut sim = Simulation {
            plan: plan.clone(),
            config: config.clone(),
            workload: workload.peekable(),
            now_ms: 0,
            end_ms,
            window_ms,
            window_start_ms: 0,
            last_ts: 0,
            phases: selectivity_phases(&plan.spec, config.seed),
            nodes: Vec::new(),
            node_index: BTreeMap::new(),
            order: Vec::new(),
            channels: Vec::new(),
            sites: vec![SiteRt::default(); topology.sites.len()],
            buckets,
            share: Vec::new(),
            codec_metrics: BTreeMap::new(),
            link_metrics: vec![LinkMetrics::default(); topology.links.len()],
            windows: Vec::new(),
        };
        sim.install(plan.clone())?;
        Ok(sim)
    }

    pub fn now_s(&self) -> f64 {
        self.now_ms as f64 / 1000.0
    }

    pub fn is_done(&self) -> bool {
        self.now_ms >= self.end_ms
    }

    pub fn plan(&self) -> &PhysicalPlan {
        &self.plan
    }

    /// Replaces the running plan between ticks. Component queues and the
    /// controllers of channels that stay uplinks carry over by id; anything
    /// buffered on a channel that disappears is delivered straight through.
    pub fn swap_plan(&mut self, plan: PhysicalPlan) -> Result<(), SimError> {
        if plan.topology != self.plan.topology || plan.spec != self.plan.spec {
            return Err(SimError::Config(
                "a swapped plan must keep the spec and topology".into(),
            ));
        }
        self.install(plan)
    }

    fn install(&mut self, plan: PhysicalPlan) -> Result<(), SimError> {
        let spec = plan.spec.clone();
        let topology = plan.topology.clone();
        let order = topological_order(&spec).map_err(|e| SimError::Config(e.to_string()))?;

        let mut old_nodes: BTreeMap<String, NodeRt> = self.nodes.drain(..).map(|n| (n.id.clone(), n)).collect();
        let mut old_channels: BTreeMap<String, ChannelRt> =
            self.channels.drain(..).map(|c| (c.id.clone(), c)).collect();

        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        let push = |nodes: &mut Vec<NodeRt>, index: &mut BTreeMap<String, usize>, mut n: NodeRt| {
            if let Some(old) = old_nodes.remove(&n.id) {
                n.queue = old.queue;
                n.n_in = old.n_in;
                n.n_out = old.n_out;
                n.metrics = old.metrics;
            }
            index.insert(n.id.clone(), nodes.len());
            nodes.push(n);
        };
        let blank = |id: &str, role: Role, site: usize, class: NodeClass| NodeRt {
            id: id.to_string(),
            role,
            site,
            cost: 0.0,
            selectivity: 1.0,
            phase: 0.0,
            n_in: 0,
            n_out: 0,
            queue: VecDeque::new(),
            out_channels: Vec::new(),
            shadow: None,
            mem_mb: 0.0,
            metrics: NodeMetrics::new(class),
        };
        let mut push = push;
        for id in &order {
            let site = site_index(&topology, plan.site_of(id).expect("compiled plans place every node"));
            let sf = topology.sites[site].true_speed();
            if let Some(c) = spec.component(id) {
                let mut n = blank(id, Role::Component, site, NodeClass::Component);
                n.cost = c.cpu_units_per_msg / sf;
                n.selectivity = c.selectivity;
                n.phase = self.phases[id.as_str()];
                n.mem_mb = c.mem_mb;
                push(&mut nodes, &mut index, n);
                if let Some(sh) = plan.shadow_of(id) {
                    let ssite = site_index(&topology, &sh.site);
                    let mut n = blank(&shadow_id(id), Role::Shadow, ssite, NodeClass::Shadow);
                    n.cost = c.cpu_units_per_msg / topology.sites[ssite].true_speed();
                    n.mem_mb = c.mem_mb;
                    push(&mut nodes, &mut index, n);
                }
            } else if spec.source(id).is_some() {
                push(&mut nodes, &mut index, blank(id, Role::Source, site, NodeClass::Source));
            } else {
                push(&mut nodes, &mut index, blank(id, Role::Sink, site, NodeClass::Sink));
            }
        }
        for n in 0..nodes.len() {
            if nodes[n].role == Role::Component {
                nodes[n].shadow = index.get(&shadow_id(&nodes[n].id)).copied();
            }
        }

        let mut share = vec![0u32; topology.links.len() * 2];
        for ch in plan.uplinks() {
            for hop in &ch.route {
                share[bucket_slot(hop)] += 1;
            }
        }

        let mut channels = Vec::new();
        let mut flushed: Vec<(usize, Vec<Record>, u64)> = Vec::new();
        for ch in &plan.channels {
            let (from, to) = &ch.edge;
            let declared = match spec.source(from) {
                Some(s) => s.bytes_per_msg,
                None => spec.component(from).map_or(0, |c| c.out_bytes_per_msg),
            };
            let to_idx = index[to.as_str()];
            let old = old_channels.remove(&ch.id);
            let uplink = if ch.is_uplink() {
                let enc_site = site_index(&topology, &ch.from_site);
                let params = ChannelParams {
                    producer: from.clone(),
                    declared_bytes_per_msg: declared,
                    control_interval_ms: self.config.control_interval_ms,
                    per_gb_cost: ch.route.iter().map(|h| topology.links[h.link].per_gb_cost).sum(),
                    codec_cpu: topology.codec_cpu,
                    encoder_speed: topology.sites[enc_site].speed_factor,
                };
                let carried = old.as_ref().and_then(|o| o.uplink.clone());
                let (ctl, inbox, budget_bits, enc_cpu_interval, enc_cpu_prev) = match carried {
                    Some(mut u) => {
                        u.ctl.params = params;
                        (u.ctl, u.inbox, u.budget_bits, u.enc_cpu_interval, u.enc_cpu_prev)
                    }
                    None => (ControllerState::new(params), Vec::new(), 0.0, 0.0, 0.0),
                };
                Some(UplinkRt {
                    ctl,
                    inbox,
                    hops: ch.route.clone(),
                    enc_id: ch.encoder_id(),
                    dec_id: ch.decoder_id(),
                    enc_site,
                    dec_site: site_index(&topology, &ch.to_site),
                    budget_bits,
                    enc_cpu_interval,
                    enc_cpu_prev,
                })
            } else {
                if let Some(o) = &old {
                    if let Some(u) = &o.uplink {
                        flushed.push((to_idx, drain_uplink(u, &ch.id)?, declared));
                    }
                }
                None
            };
            let metrics = old.map(|o| o.metrics).unwrap_or_default();
            channels.push(ChannelRt {
                id: ch.id.clone(),
                to: to_idx,
                declared,
                uplink,
                metrics,
            });
        }
        for (i, ch) in plan.channels.iter().enumerate() {
            let from = index[ch.edge.0.as_str()];
            nodes[from].out_channels.push(i);
        }

        self.order = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.role, Role::Component | Role::Shadow))
            .map(|(i, _)| i)
            .collect();
        self.nodes = nodes;
        self.node_index = index;
        self.channels = channels;
        self.share = share;
        self.plan = plan;
        for (to, records, declared) in flushed {
            for r in records {
                deliver(&mut self.nodes, to, r, declared);
            }
        }
        Ok(())
    }

    /// Advances one tick. Returns false once the run is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.is_done() {
            return Ok(false);
        }
        let tick_s = self.config.tick_ms as f64 / 1000.0;
        let now_s = self.now_s();
        let boundary = self.now_ms.is_multiple_of(self.config.control_interval_ms);
        let topology = self.plan.topology.clone();

        for (site, rt) in topology.sites.iter().zip(self.sites.iter_mut()) {
            rt.budget = site.cpu_units * tick_s + rt.budget.min(0.0);
            if boundary {
                rt.used_prev = rt.used_interval;
                rt.used_interval = 0.0;
            }
        }
        if boundary {
            for ch in &mut self.channels {
                if let Some(u) = &mut ch.uplink {
                    u.enc_cpu_prev = u.enc_cpu_interval;
                    u.enc_cpu_interval = 0.0;
                }
            }
        }

        self.inject()?;
        self.process();
        if boundary {
            self.control(&topology, now_s)?;
        }
        self.transmit(&topology, now_s, tick_s)?;

        self.now_ms += self.config.tick_ms;
        if (self.now_ms - self.window_start_ms) >= self.window_ms || self.now_ms >= self.end_ms {
            let w = self.snapshot();
            self.windows.push(w);
            self.reset_window();
        }
        Ok(true)
    }

    fn inject(&mut self) -> Result<(), SimError> {
        let until = self.now_ms + self.config.tick_ms;
        while let Some((_, rec)) = self.workload.peek() {
            if rec.timestamp_ms >= until {
                break;
            }
            let (source, rec) = self.workload.next().expect("peeked");
            if rec.timestamp_ms < self.last_ts {
                return Err(SimError::UnsortedWorkload {
                    timestamp_ms: rec.timestamp_ms,
                });
            }
            self.last_ts = rec.timestamp_ms;
            let idx = match self.node_index.get(&source) {
                Some(&i) if self.nodes[i].role == Role::Source => i,
                _ => return Err(SimError::UnknownSource(source)),
            };
            self.nodes[idx].metrics.msgs_out += 1;
            self.emit(idx, rec);
        }
        Ok(())
    }

    fn emit(&mut self, from: usize, rec: Record) {
        let outs = self.nodes[from].out_channels.clone();
        let Some((&last, rest)) = outs.split_last() else {
            return;
        };
        for &ch in rest {
            self.offer(ch, rec.clone());
        }
        self.offer(last, rec);
    }

    fn offer(&mut self, ch: usize, rec: Record) {
        let now_ms = self.now_ms;
        let c = &mut self.channels[ch];
        c.metrics.bytes_offered_raw += c.declared;
        match &mut c.uplink {
            Some(u) => u.inbox.push(PendingRecord {
                arrival_ms: now_ms,
                record: rec,
            }),
            None => {
                c.metrics.records_delivered += 1;
                let (to, declared) = (c.to, c.declared);
                deliver(&mut self.nodes, to, rec, declared);
            }
        }
    }

    fn process(&mut self) {
        let now_ms = self.now_ms;
        let mut out = Vec::new();
        for k in 0..self.order.len() {
            let i = self.order[k];
            let site = self.nodes[i].site;
            let n = &mut self.nodes[i];
            let budget = &mut self.sites[site];
            while let Some(rec) = n.queue.front() {
                if n.cost > 0.0 && budget.budget < n.cost {
                    break;
                }
                budget.budget -= n.cost;
                budget.used_window += n.cost;
                budget.used_interval += n.cost;
                n.metrics.cpu_units_used += n.cost;
                n.metrics.msgs_in += 1;
                if n.role == Role::Shadow {
                    n.queue.pop_front();
                    continue;
                }
                n.n_in += 1;
                let target = rounded_outputs(n.n_in, n.selectivity, n.phase);
                for _ in n.n_out..target {
                    out.push(Record::new(now_ms, rec.sensor_id.clone(), rec.value));
                }
                n.n_out = n.n_out.max(target);
                n.queue.pop_front();
            }
            if out.is_empty() {
                continue;
            }
            self.nodes[i].metrics.msgs_out += out.len() as u64;
            for rec in out.drain(..) {
                self.emit(i, rec);
            }
        }
    }

    fn channel_cap(&self, topology: &Topology, hops: &[Hop], now_s: f64) -> f64 {
        hops.iter()
            .map(|h| bandwidth_at(&topology.links[h.link], now_s) / f64::from(self.share[bucket_slot(h)].max(1)))
            .fold(f64::INFINITY, f64::min)
    }

    fn control(&mut self, topology: &Topology, now_s: f64) -> Result<(), SimError> {
        let interval_s = self.config.control_interval_ms as f64 / 1000.0;
        for ci in 0..self.channels.len() {
            let Some(u) = &self.channels[ci].uplink else {
                continue;
            };
            let cap = self.channel_cap(topology, &u.hops, now_s);
            let enc_site = &topology.sites[u.enc_site];
            let others = (self.sites[u.enc_site].used_prev - u.enc_cpu_prev).max(0.0);
            let headroom = (enc_site.cpu_units - others / interval_s).max(0.0);

            let ch = &mut self.channels[ci];
            let u = ch.uplink.as_mut().expect("checked above");
            let decision = u.ctl.tick(cap, u.inbox.drain(..), headroom);
            u.budget_bits = decision.send_budget_bits;
            ch.metrics.codec = Some(decision.codec);
            ch.metrics.batch_window_s = decision.batch_window_s;

            let speed = enc_site.true_speed();
            let cpu_per_msg = topology.codec_cpu.encoder(decision.codec) / speed;
            for batch in u.ctl.enqueue_and_cut_batches(self.now_ms) {
                let n = batch.records.len() as u64;
                let encoded = encode(decision.codec, &batch).map_err(|e| SimError::Codec {
                    channel: ch.id.clone(),
                    message: e.to_string(),
                })?;
                u.ctl
                    .observe_encoding(decision.codec, encoded.raw_bytes, encoded.payload.len());
                let wire = u.ctl.enqueue_encoded(encoded);
                let cpu = n as f64 * cpu_per_msg;
                let m = self
                    .codec_metrics
                    .entry(u.enc_id.clone())
                    .or_insert_with(|| NodeMetrics::new(NodeClass::Codec));
                m.msgs_in += n;
                m.msgs_out += n;
                m.bytes_in += n * ch.declared;
                m.bytes_out += wire;
                m.cpu_units_used += cpu;
                u.enc_cpu_interval += cpu;
                let s = &mut self.sites[u.enc_site];
                s.budget -= cpu;
                s.used_window += cpu;
                s.used_interval += cpu;
            }
        }
        Ok(())
    }

    fn transmit(&mut self, topology: &Topology, now_s: f64, tick_s: f64) -> Result<(), SimError> {
        for (slot, b) in self.buckets.iter_mut().enumerate() {
            b.refill(bandwidth_at(&topology.links[slot / 2], now_s), tick_s);
        }
        let mut blocked = vec![false; self.channels.len()];
        loop {
            let mut progressed = false;
            for ci in 0..self.channels.len() {
                if blocked[ci] {
                    continue;
                }
                let ch = &mut self.channels[ci];
                let Some(u) = &mut ch.uplink else {
                    blocked[ci] = true;
                    continue;
                };
                let Some(head) = u.ctl.backlog.front() else {
                    blocked[ci] = true;
                    continue;
                };
                if u.budget_bits <= 0.0 {
                    blocked[ci] = true;
                    continue;
                }
                let seg = head.remaining_bytes.min(SEGMENT_BYTES);
                let bits = (seg * 8) as f64;
                let outcomes: Vec<TransmitOutcome> = u
                    .hops
                    .iter()
                    .map(|h| self.buckets[bucket_slot(h)].outcome(bits, true))
                    .collect();
                if outcomes.contains(&TransmitOutcome::Deferred) {
                    blocked[ci] = true;
                    continue;
                }
                for (h, o) in u.hops.iter().zip(outcomes) {
                    self.buckets[bucket_slot(h)].apply(o, bits);
                    let lm = &mut self.link_metrics[h.link];
                    match h.direction {
                        Direction::Up => lm.bytes_up += seg,
                        Direction::Down => lm.bytes_down += seg,
                    }
                }
                u.budget_bits -= bits;
                ch.metrics.bytes_sent_encoded += seg;
                progressed = true;
                if let Some(done) = u.ctl.consume_head(seg) {
                    let batch = done.encoded.decode().map_err(|e| SimError::Codec {
                        channel: ch.id.clone(),
                        message: e.to_string(),
                    })?;
                    let n = batch.records.len() as u64;
                    let codec: CodecId = done.encoded.codec;
                    let cpu = n as f64 * topology.codec_cpu.decoder(codec) / topology.sites[u.dec_site].true_speed();
                    let m = self
                        .codec_metrics
                        .entry(u.dec_id.clone())
                        .or_insert_with(|| NodeMetrics::new(NodeClass::Codec));
                    m.msgs_in += n;
                    m.msgs_out += n;
                    m.bytes_in += done.wire_bytes;
                    m.bytes_out += done.declared_raw_bytes;
                    m.cpu_units_used += cpu;
                    let s = &mut self.sites[u.dec_site];
                    s.budget -= cpu;
                    s.used_window += cpu;
                    s.used_interval += cpu;
                    ch.metrics.records_delivered += n;
                    let (to, declared) = (ch.to, ch.declared);
                    for r in batch.records {
                        deliver(&mut self.nodes, to, r, declared);
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        Ok(())
    }

    /// Metrics accumulated so far in the current window, with gauges taken
    /// at the current time. Does not change any state.
    pub fn snapshot(&self) -> MetricsWindow {
        let topology = &self.plan.topology;
        let span_s = (self.now_ms - self.window_start_ms) as f64 / 1000.0;
        let mut w = MetricsWindow {
            start_s: self.window_start_ms as f64 / 1000.0,
            end_s: self.now_s(),
            ..MetricsWindow::default()
        };
        for n in &self.nodes {
            let mut m = n.metrics.clone();
            m.mem_mb = n.mem_mb;
            m.queue_len = n.queue.len() as u64;
            w.nodes.insert(n.id.clone(), m);
        }
        for (id, m) in &self.codec_metrics {
            w.nodes.insert(id.clone(), m.clone());
        }
        for c in &self.plan.injected {
            w.nodes
                .entry(c.id.clone())
                .or_insert_with(|| NodeMetrics::new(NodeClass::Codec));
        }
        for c in &self.channels {
            let mut m = c.metrics.clone();
            if let Some(u) = &c.uplink {
                m.backlog_bytes = u.ctl.backlog_bytes + u.ctl.overdue_pending_bytes(self.now_ms);
                m.records_queued = u.inbox.len() as u64 + u.ctl.queued_records();
            }
            w.channels.insert(c.id.clone(), m);
        }
        let mem = self.plan.memory_by_site();
        for (site, rt) in topology.sites.iter().zip(&self.sites) {
            let cap = site.cpu_units * span_s;
            w.sites.insert(
                site.id.clone(),
                SiteMetrics {
                    cpu_units_used: rt.used_window,
                    cpu_utilization: if cap > 0.0 {
                        (rt.used_window / cap).clamp(0.0, 1.0)
                    } else {
                        0.0
                    },
                    mem_utilization: if site.mem_mb > 0.0 {
                        (mem.get(site.id.as_str()).copied().unwrap_or(0.0) / site.mem_mb).clamp(0.0, 1.0)
                    } else {
                        0.0
                    },
                },
            );
        }
        for (link, m) in topology.links.iter().zip(&self.link_metrics) {
            w.links.insert(format!("{}-{}", link.from, link.to), *m);
        }
        w
    }

    fn reset_window(&mut self) {
        self.window_start_ms = self.now_ms;
        for n in &mut self.nodes {
            n.metrics = NodeMetrics::new(n.metrics.class);
        }
        for m in self.codec_metrics.values_mut() {
            *m = NodeMetrics::new(NodeClass::Codec);
        }
        for c in &mut self.channels {
            c.metrics.bytes_offered_raw = 0;
            c.metrics.bytes_sent_encoded = 0;
            c.metrics.records_delivered = 0;
        }
        for s in &mut self.sites {
            s.used_window = 0.0;
        }
        for l in &mut self.link_metrics {
            *l = LinkMetrics::default();
        }
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    pub fn finish(mut self) -> Result<MetricsSeries, SimError> {
        self.run_to_end()?;
        let caps = self
            .plan
            .topology
            .sites
            .iter()
            .map(|s| (s.id.clone(), s.cpu_units))
            .collect();
        Ok(MetricsSeries::from_windows(self.windows, &caps))
    }
}

fn deliver(nodes: &mut [NodeRt], to: usize, rec: Record, declared: u64) {
    let n = &mut nodes[to];
    match n.role {
        Role::Sink => {
            n.metrics.msgs_in += 1;
            n.metrics.bytes_in += declared;
        }
        _ => {
            if let Some(s) = n.shadow {
                let copy = rec.clone();
                nodes[to].queue.push_back(rec);
                nodes[s].queue.push_back(copy);
            } else {
                n.queue.push_back(rec);
            }
        }
    }
}

fn drain_uplink(u: &UplinkRt, channel: &str) -> Result<Vec<Record>, SimError> {
    let mut out = Vec::new();
    for q in &u.ctl.backlog {
        let batch = q.encoded.decode().map_err(|e| SimError::Codec {
            channel: channel.to_string(),
            message: e.to_string(),
        })?;
        out.extend(batch.records);
    }
    out.extend(u.ctl.pending.iter().map(|p| p.record.clone()));
    out.extend(u.inbox.iter().map(|p| p.record.clone()));
    Ok(out)
}

/// Runs a plan against a workload for `config.duration_s`.
pub fn run(
    plan: &PhysicalPlan,
    workload: impl IntoIterator<Item = (String, Record)>,
    config: &SimConfig,
) -> Result<MetricsSeries, SimError> {
    Simulation::new(plan, workload.into_iter(), config)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transmit_rules() {
        let mut b = TokenBucket {
            capacity_bits: 2e6,
            tokens_bits: 1e6,
        };
        assert_eq!(transmit(&mut b, 8e5, true), TransmitOutcome::Sent);
        assert_eq!(b.tokens_bits, 2e5);
        let mut b = TokenBucket {
            capacity_bits: 2e6,
            tokens_bits: 1e5,
        };
        assert_eq!(transmit(&mut b, 8e5, true), TransmitOutcome::SentOvershoot);
        assert_eq!(b.tokens_bits, -7e5);
        let mut b = TokenBucket {
            capacity_bits: 2e6,
            tokens_bits: 0.0,
        };
        assert_eq!(transmit(&mut b, 1.0, true), TransmitOutcome::Deferred);
        let mut b = TokenBucket {
            capacity_bits: 2e6,
            tokens_bits: 1e5,
        };
        assert_eq!(transmit(&mut b, 8e5, false), TransmitOutcome::Deferred);
    }

    #[test]
    fn debt_is_bounded_by_capacity() {
        let mut b = TokenBucket {
            capacity_bits: 1e3,
            tokens_bits: 1.0,
        };
        assert_eq!(transmit(&mut b, 1e9, true), TransmitOutcome::SentOvershoot);
        assert_eq!(b.tokens_bits, -1e3);
    }

    #[test]
    fn refill_clamps_to_new_capacity() {
        let mut b = TokenBucket::full(5e6);
        b.refill(2.5e5, 0.1);
        assert_eq!(b.capacity_bits, 5e5);
        assert_eq!(b.tokens_bits, 5e5);
    }

    #[test]
    fn rounding_tracks_selectivity() {
        let out = rounded_outputs(1000, 0.1, 0.73);
        assert_eq!(out, 100);
        assert_eq!(rounded_outputs(0, 0.5, 0.99), 0);
        assert_eq!(rounded_outputs(3, 2.0, 0.0), 6);
    }

    #[test]
    fn config_checks() {
        assert!(SimConfig::new(10.0, 1).check().is_ok());
        let mut c = SimConfig::new(10.0, 1);
        c.control_interval_ms = 150;
        assert!(c.check().is_err());
        let c = SimConfig::new(10.05, 1);
        assert!(c.check().is_err());
        let mut c = SimConfig::new(10.0, 1);
        c.metrics_window_s = 0.0;
        assert!(c.check().is_err());
    }
}
