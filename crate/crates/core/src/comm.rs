//! Per-channel adaptive batching and compression controller.
//!
//! Once per control interval the controller looks at how much raw data
//! arrived and at the bandwidth it may use, then picks a codec and a batch
//! window: the cheapest codec whose estimated encoded rate fits the cap, or
//! the tightest codec plus a longer window when nothing fits. Records wait in
//! `pending` until their window closes; encoded batches wait in `backlog`
//! until the token bucket lets them out.

use std::collections::VecDeque;

use crate::codec::{Batch, CodecBase, CodecCpuTable, CodecId, EncodedBatch};
use crate::workload::Record;

pub const WINDOW_LADDER: [u32; 6] = [1, 2, 5, 10, 30, 60];
pub const DEFAULT_ALPHA: f64 = 0.3;

/// Bootstrap compression ratio, used until a codec has been observed.
pub fn prior_ratio(codec: CodecId) -> f64 {
    let base = match codec.base {
        CodecBase::Json => 1.0,
        CodecBase::Binpack => 0.45,
        CodecBase::Delta => 0.30,
    };
    if codec.deflate {
        base * 0.6
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioEstimate {
    pub value: f64,
    /// False while `value` is still the prior.
    pub observed: bool,
}

/// Static facts about the channel a controller serves.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    /// Upstream node id; becomes the batch `source_id`.
    pub producer: String,
    pub declared_bytes_per_msg: u64,
    pub control_interval_ms: u64,
    /// Summed over every hop of the route, in $/GiB.
    pub per_gb_cost: f64,
    pub codec_cpu: CodecCpuTable,
    pub encoder_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingRecord {
    pub arrival_ms: u64,
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedBatch {
    pub encoded: EncodedBatch,
    /// Declared raw bytes scaled by the measured compression ratio.
    pub wire_bytes: u64,
    pub remaining_bytes: u64,
    pub declared_raw_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub codec: CodecId,
    pub batch_window_s: u32,
    pub send_budget_bits: f64,
    pub drain: bool,
    pub required_bits_per_s: f64,
    pub estimated_encoded_bits_per_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub params: ChannelParams,
    pub ratio_estimates: [RatioEstimate; 6],
    window_step: usize,
    pub current_codec: CodecId,
    pub pending: VecDeque<PendingRecord>,
    pub backlog: VecDeque<QueuedBatch>,
    pub backlog_bytes: u64,
    pub last_observed_cap: f64,
    pub ewma_alpha: f64,
    calm_intervals: u32,
}

impl ControllerState {
    pub fn new(params: ChannelParams) -> Self {
        ControllerState {
            params,
            ratio_estimates: CodecId::ALL.map(|c| RatioEstimate {
                value: prior_ratio(c),
                observed: false,
            }),
            window_step: 0,
            current_codec: CodecId::JSON,
            pending: VecDeque::new(),
            backlog: VecDeque::new(),
            backlog_bytes: 0,
            last_observed_cap: 0.0,
            ewma_alpha: DEFAULT_ALPHA,
            calm_intervals: 0,
        }
    }

    pub fn batch_window_s(&self) -> u32 {
        WINDOW_LADDER[self.window_step]
    }

    pub fn ratio(&self, codec: CodecId) -> f64 {
        self.ratio_estimates[codec.ordinal()].value
    }

    fn interval_s(&self) -> f64 {
        self.params.control_interval_ms as f64 / 1000.0
    }

    /// One control step. `observed_cap` is this channel's share of the link
    /// in bits/s; `edge_cpu_headroom` is spare CPU units at the encoder site.
    pub fn tick(
        &mut self,
        observed_cap: f64,
        arrived: impl IntoIterator<Item = PendingRecord>,
        edge_cpu_headroom: f64,
    ) -> ControlDecision {
        let before = self.pending.len();
        self.pending.extend(arrived);
        let n = (self.pending.len() - before) as f64;
        let interval = self.interval_s();
        let required = n * self.params.declared_bytes_per_msg as f64 * 8.0 / interval;
        let msgs_per_s = n / interval;

        let cpu = |c: CodecId| msgs_per_s * self.params.codec_cpu.encoder(c) / self.params.encoder_speed;
        let cpu_ok = |c: CodecId| cpu(c) <= edge_cpu_headroom;
        let rate = |c: CodecId| required * self.ratio(c);

        let fitting = CodecId::ALL
            .into_iter()
            .filter(|&c| cpu_ok(c) && rate(c) <= observed_cap)
            .min_by(|&a, &b| {
                let cost = |c| rate(c) * self.params.per_gb_cost;
                cost(a)
                    .total_cmp(&cost(b))
                    .then(cpu(a).total_cmp(&cpu(b)))
                    .then(a.ordinal().cmp(&b.ordinal()))
            });
        let congested = fitting.is_none();
        let codec = fitting.unwrap_or_else(|| {
            CodecId::ALL
                .into_iter()
                .filter(|&c| cpu_ok(c))
                .min_by(|&a, &b| {
                    self.ratio(a)
                        .total_cmp(&self.ratio(b))
                        .then(a.ordinal().cmp(&b.ordinal()))
                })
                .unwrap_or(CodecId::JSON)
        });
        let estimated = rate(codec);
        if congested {
            self.window_step = (self.window_step + 1).min(WINDOW_LADDER.len() - 1);
            self.calm_intervals = 0;
        }

        let drain = self.backlog_bytes > 0 && observed_cap > estimated;
        let send_budget_bits = if drain {
            observed_cap * interval
        } else {
            observed_cap.min(estimated) * interval + observed_cap * interval
        };

        if !congested {
            if self.backlog.is_empty() && observed_cap >= 2.0 * estimated {
                self.calm_intervals += 1;
                if self.calm_intervals >= 2 && self.window_step > 0 {
                    self.window_step -= 1;
                    self.calm_intervals = 0;
                }
            } else {
                self.calm_intervals = 0;
            }
        }

        self.current_codec = codec;
        self.last_observed_cap = observed_cap;
        ControlDecision {
            codec,
            batch_window_s: self.batch_window_s(),
            send_budget_bits,
            drain,
            required_bits_per_s: required,
            estimated_encoded_bits_per_s: estimated,
        }
    }

    /// Folds a measured ratio into the codec's EWMA. The first observation
    /// replaces the prior outright.
    pub fn observe_encoding(&mut self, codec: CodecId, raw_bytes: usize, encoded_bytes: usize) {
        if raw_bytes == 0 {
            return;
        }
        let observed = encoded_bytes as f64 / raw_bytes as f64;
        let est = &mut self.ratio_estimates[codec.ordinal()];
        est.value = if est.observed {
            (1.0 - self.ewma_alpha) * est.value + self.ewma_alpha * observed
        } else {
            observed
        };
        est.observed = true;
    }

    /// Cuts every window that closed at or before `now_ms` into its own
    /// batch. Windows are aligned to multiples of the current window length.
    pub fn enqueue_and_cut_batches(&mut self, now_ms: u64) -> Vec<Batch> {
        let w_ms = u64::from(self.batch_window_s()) * 1000;
        let boundary = now_ms / w_ms * w_ms;
        let mut batches: Vec<Batch> = Vec::new();
        let mut current: Option<u64> = None;
        while self.pending.front().is_some_and(|p| p.arrival_ms < boundary) {
            let p = self.pending.pop_front().expect("front checked");
            let slot = p.arrival_ms / w_ms;
            if current != Some(slot) {
                batches.push(Batch::new(self.params.producer.clone(), Vec::new()));
                current = Some(slot);
            }
            batches.last_mut().expect("pushed above").records.push(p.record);
        }
        batches
    }

    /// Queues an encoded batch for transmission and returns its wire size.
    pub fn enqueue_encoded(&mut self, encoded: EncodedBatch) -> u64 {
        let declared_raw = u64::from(encoded.record_count) * self.params.declared_bytes_per_msg;
        let wire = wire_bytes(declared_raw, encoded.payload.len(), encoded.raw_bytes);
        self.backlog_bytes += wire;
        self.backlog.push_back(QueuedBatch {
            encoded,
            wire_bytes: wire,
            remaining_bytes: wire,
            declared_raw_bytes: declared_raw,
        });
        wire
    }

    /// Marks `bytes` of the head batch as sent; returns the batch once its
    /// last byte is out.
    pub fn consume_head(&mut self, bytes: u64) -> Option<QueuedBatch> {
        let head = self.backlog.front_mut()?;
        let take = bytes.min(head.remaining_bytes);
        head.remaining_bytes -= take;
        self.backlog_bytes -= take;
        if head.remaining_bytes == 0 {
            self.backlog.pop_front()
        } else {
            None
        }
    }

    /// Declared bytes of records that arrived more than one control
    /// interval before `now_ms` and are still unencoded.
    pub fn overdue_pending_bytes(&self, now_ms: u64) -> u64 {
        let cutoff = now_ms.saturating_sub(self.params.control_interval_ms);
        let n = self.pending.iter().take_while(|p| p.arrival_ms < cutoff).count() as u64;
        n * self.params.declared_bytes_per_msg
    }

    pub fn queued_records(&self) -> u64 {
        self.pending.len() as u64
            + self
                .backlog
                .iter()
                .map(|b| u64::from(b.encoded.record_count))
                .sum::<u64>()
    }
}

/// `ceil(declared_raw × payload / json)` in exact integer arithmetic.
pub fn wire_bytes(declared_raw: u64, payload_len: usize, json_len: usize) -> u64 {
    if json_len == 0 {
        return 0;
    }
    let num = u128::from(declared_raw) * payload_len as u128;
    num.div_ceil(json_len as u128) as u64
}
