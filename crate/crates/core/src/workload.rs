//! Synthetic sensor timeseries and trace replay.
//!
//! Generated streams are a pure function of the [`WorkloadSpec`], seed
//! included. Randomness comes from ChaCha8 (`rand_chacha` 0.3), one stream per
//! sensor selected with `set_stream((source_index << 32) | sensor_index)`;
//! Gaussian noise uses Box-Muller with the portable `libm` routines so values
//! are bit-identical across platforms.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub timestamp_ms: u64,
    pub sensor_id: String,
    pub value: f64,
}

impl Record {
    pub fn new(timestamp_ms: u64, sensor_id: impl Into<String>, value: f64) -> Self {
        Self {
            timestamp_ms,
            sensor_id: sensor_id.into(),
            value,
        }
    }

    /// Field equality with floats compared by bit pattern.
    pub fn bit_eq(&self, other: &Record) -> bool {
        self.timestamp_ms == other.timestamp_ms
            && self.sensor_id == other.sensor_id
            && self.value.to_bits() == other.value.to_bits()
    }
}

pub const MAX_SENSOR_ID_BYTES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SensorModel {
    Constant {
        level: f64,
    },
    SineNoise {
        amplitude: f64,
        period_s: f64,
        noise_sd: f64,
    },
    RandomWalk {
        step_sd: f64,
        start: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceWorkload {
    pub source_id: String,
    pub sensors: u32,
    pub model: SensorModel,
    /// Messages per second per sensor.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub sources: Vec<SourceWorkload>,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
    #[error("line {line}: timestamp {timestamp_ms} of source `{source_id}` goes backwards")]
    Order {
        line: u64,
        source_id: String,
        timestamp_ms: u64,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl WorkloadSpec {
    pub fn check(&self) -> Result<(), WorkloadError> {
        if !(self.duration_s >= 0.0) {
            return Err(WorkloadError::Invalid("duration_s must be >= 0".into()));
        }
        for s in &self.sources {
            if s.sensors < 1 {
                return Err(WorkloadError::Invalid(format!(
                    "source `{}` needs at least one sensor",
                    s.source_id
                )));
            }
            if !(s.rate > 0.0) || !s.rate.is_finite() {
                return Err(WorkloadError::Invalid(format!(
                    "source `{}` rate must be > 0",
                    s.source_id
                )));
            }
            match s.model {
                SensorModel::SineNoise { period_s, noise_sd, .. } if !(period_s > 0.0) || !(noise_sd >= 0.0) => {
                    return Err(WorkloadError::Invalid(format!(
                        "source `{}`: period_s must be > 0 and noise_sd >= 0",
                        s.source_id
                    )));
                }
                SensorModel::RandomWalk { step_sd, .. } if !(step_sd >= 0.0) => {
                    return Err(WorkloadError::Invalid(format!(
                        "source `{}`: step_sd must be >= 0",
                        s.source_id
                    )));
                }
                _ => {}
            }
            if sensor_name(&s.source_id, s.sensors - 1).len() > MAX_SENSOR_ID_BYTES {
                return Err(WorkloadError::Invalid(format!(
                    "source `{}`: sensor ids exceed 64 bytes",
                    s.source_id
                )));
            }
        }
        Ok(())
    }

    /// Aggregate message rate of one source, across its sensors.
    pub fn source_rate(&self, source_id: &str) -> f64 {
        self.sources
            .iter()
            .filter(|s| s.source_id == source_id)
            .map(|s| s.rate * s.sensors as f64)
            .sum()
    }
}

pub fn sensor_name(source_id: &str, index: u32) -> String {
    format!("{source_id}-{index:03}")
}

struct SensorStream {
    source_id: String,
    sensor_id: String,
    rate: f64,
    model: SensorModel,
    rng: ChaCha8Rng,
    k: u64,
    walk: f64,
}

impl SensorStream {
    fn timestamp(&self) -> u64 {
        (self.k as f64 * 1000.0 / self.rate).round() as u64
    }

    fn next_value(&mut self) -> f64 {
        let t = self.k as f64 / self.rate;
        match self.model {
            SensorModel::Constant { level } => level,
            SensorModel::SineNoise {
                amplitude,
                period_s,
                noise_sd,
            } => {
                let base = amplitude * lattice_sin(t / period_s);
                if noise_sd > 0.0 {
                    base + noise_sd * standard_normal(&mut self.rng)
                } else {
                    base
                }
            }
            SensorModel::RandomWalk { step_sd, start } => {
                if self.k == 0 {
                    self.walk = start;
                } else if step_sd > 0.0 {
                    self.walk += step_sd * standard_normal(&mut self.rng);
                }
                self.walk
            }
        }
    }
}

/// `sin(2*pi*cycles)` reduced by quarter turns, so quarter-period samples are exact.
fn lattice_sin(cycles: f64) -> f64 {
    let frac = cycles - libm::floor(cycles);
    let quarters = frac * 4.0;
    let q = libm::floor(quarters);
    let r = (quarters - q) * std::f64::consts::FRAC_PI_2;
    match q as u8 {
        0 => libm::sin(r),
        1 => libm::cos(r),
        2 => -libm::sin(r),
        _ => -libm::cos(r),
    }
}

fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Globally time-ordered record stream; ties break on `(source_id, sensor_id)`.
pub struct WorkloadStream {
    sensors: Vec<SensorStream>,
    heap: BinaryHeap<Reverse<(u64, usize)>>,
    end_ms: f64,
}

impl Iterator for WorkloadStream {
    type Item = (String, Record);

    fn next(&mut self) -> Option<Self::Item> {
        let Reverse((ts, idx)) = self.heap.pop()?;
        let sensor = &mut self.sensors[idx];
        let value = sensor.next_value();
        let item = (
            sensor.source_id.clone(),
            Record::new(ts, sensor.sensor_id.clone(), value),
        );
        sensor.k += 1;
        let next_ts = sensor.timestamp();
        if (next_ts as f64) < self.end_ms {
            self.heap.push(Reverse((next_ts, idx)));
        }
        Some(item)
    }
}

pub fn generate(spec: &WorkloadSpec) -> Result<WorkloadStream, WorkloadError> {
    spec.check()?;
    let mut sensors = Vec::new();
    for (si, src) in spec.sources.iter().enumerate() {
        for i in 0..src.sensors {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((si as u64) << 32) | i as u64);
            sensors.push(SensorStream {
                source_id: src.source_id.clone(),
                sensor_id: sensor_name(&src.source_id, i),
                rate: src.rate,
                model: src.model.clone(),
                rng,
                k: 0,
                walk: 0.0,
            });
        }
    }
    // Heap order is (timestamp, index); indices follow the (source_id, sensor_id) order.
    sensors.sort_by(|a, b| (&a.source_id, &a.sensor_id).cmp(&(&b.source_id, &b.sensor_id)));
    let end_ms = spec.duration_s * 1000.0;
    let heap = (0..sensors.len())
        .filter(|_| end_ms > 0.0)
        .map(|i| Reverse((0u64, i)))
        .collect();
    Ok(WorkloadStream { sensors, heap, end_ms })
}

pub const TRACE_HEADER: [&str; 4] = ["timestamp_ms", "source_id", "sensor_id", "value"];

/// Writes records in the trace CSV format.
pub fn export<W: Write>(out: W, records: impl IntoIterator<Item = (String, Record)>) -> Result<(), WorkloadError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let io = |e: csv::Error| WorkloadError::Io(e.to_string());
    w.write_record(TRACE_HEADER).map_err(io)?;
    for (source, r) in records {
        w.write_record([
            r.timestamp_ms.to_string(),
            source,
            r.sensor_id,
            format!("{:?}", r.value),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| WorkloadError::Io(e.to_string()))
}

/// Reads a trace CSV; records come back in file order.
pub fn replay<R: Read>(input: R) -> Result<Vec<(String, Record)>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers().map_err(|e| WorkloadError::Format {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(WorkloadError::Format {
            line: 1,
            message: format!("expected header `{}`", TRACE_HEADER.join(",")),
        });
    }
    let mut last: HashMap<String, u64> = HashMap::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| WorkloadError::Format {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| WorkloadError::Format { line, message };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", row.len())));
        }
        let timestamp_ms: u64 = row[0]
            .parse()
            .map_err(|_| bad(format!("bad timestamp `{}`", &row[0])))?;
        let source_id = row[1].to_string();
        let sensor_id = row[2].to_string();
        if sensor_id.len() > MAX_SENSOR_ID_BYTES {
            return Err(bad("sensor_id exceeds 64 bytes".into()));
        }
        let value: f64 = row[3].parse().map_err(|_| bad(format!("bad value `{}`", &row[3])))?;
        if let Some(&prev) = last.get(&source_id) {
            if timestamp_ms < prev {
                return Err(WorkloadError::Order {
                    line,
                    source_id,
                    timestamp_ms,
                });
            }
        }
        last.insert(source_id.clone(), timestamp_ms);
        out.push((source_id, Record::new(timestamp_ms, sensor_id, value)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(model: SensorModel, rate: f64, duration_s: f64) -> WorkloadSpec {
        WorkloadSpec {
            sources: vec![SourceWorkload {
                source_id: "src".into(),
                sensors: 1,
                model,
                rate,
            }],
            duration_s,
            seed: 7,
        }
    }

    #[test]
    fn constant_model_three_records() {
        let recs: Vec<_> = generate(&single(SensorModel::Constant { level: 20.0 }, 1.0, 3.0))
            .unwrap()
            .collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|(_, r)| r.timestamp_ms).collect::<Vec<_>>(),
            [0, 1000, 2000]
        );
        assert!(recs.iter().all(|(_, r)| r.value == 20.0));
    }

    #[test]
    fn sine_lattice_is_exact() {
        let model = SensorModel::SineNoise {
            amplitude: 1.0,
            period_s: 4.0,
            noise_sd: 0.0,
        };
        let vals: Vec<f64> = generate(&single(model, 1.0, 8.0))
            .unwrap()
            .map(|(_, r)| r.value)
            .collect();
        assert_eq!(vals, [0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = WorkloadSpec {
            sources: vec![
                SourceWorkload {
                    source_id: "b".into(),
                    sensors: 3,
                    model: SensorModel::RandomWalk {
                        step_sd: 0.5,
                        start: 1.0,
                    },
                    rate: 10.0,
                },
                SourceWorkload {
                    source_id: "a".into(),
                    sensors: 2,
                    model: SensorModel::SineNoise {
                        amplitude: 2.0,
                        period_s: 7.0,
                        noise_sd: 0.1,
                    },
                    rate: 4.0,
                },
            ],
            duration_s: 5.0,
            seed: 99,
        };
        let a: Vec<_> = generate(&spec).unwrap().collect();
        let b: Vec<_> = generate(&spec).unwrap().collect();
        assert_eq!(a.len(), 3 * 50 + 2 * 20);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.bit_eq(&y.1)));
        for w in a.windows(2) {
            let ka = (w[0].1.timestamp_ms, &w[0].0, &w[0].1.sensor_id);
            let kb = (w[1].1.timestamp_ms, &w[1].0, &w[1].1.sensor_id);
            assert!(ka < kb);
        }
        let mut other = spec.clone();
        other.seed = 100;
        let c: Vec<_> = generate(&other).unwrap().collect();
        assert!(a.iter().zip(&c).any(|(x, y)| !x.1.bit_eq(&y.1)));
    }

    #[test]
    fn two_row_trace() {
        let text = "timestamp_ms,source_id,sensor_id,value\n0,src,s1,1.5\n10,src,s2,-2\n";
        let recs = replay(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1], ("src".to_string(), Record::new(10, "s2", -2.0)));
    }

    #[test]
    fn non_numeric_value_reports_line() {
        let text = "timestamp_ms,source_id,sensor_id,value\n0,src,s1,1.5\n10,src,s2,warm\n";
        assert!(matches!(
            replay(text.as_bytes()),
            Err(WorkloadError::Format { line: 3, .. })
        ));
    }

    #[test]
    fn backwards_timestamp_is_order_error() {
        let text = "timestamp_ms,source_id,sensor_id,value\n10,src,s1,1\n5,other,s1,1\n4,src,s1,1\n";
        assert!(matches!(
            replay(text.as_bytes()),
            Err(WorkloadError::Order { line: 4, .. })
        ));
    }

    #[test]
    fn export_then_replay_is_identity() {
        let spec = single(
            SensorModel::SineNoise {
                amplitude: 3.0,
                period_s: 2.5,
                noise_sd: 0.7,
            },
            50.0,
            2.0,
        );
        let recs: Vec<_> = generate(&spec).unwrap().collect();
        let mut buf = Vec::new();
        export(&mut buf, recs.clone()).unwrap();
        let back = replay(buf.as_slice()).unwrap();
        assert_eq!(back.len(), recs.len());
        assert!(back.iter().zip(&recs).all(|(x, y)| x.0 == y.0 && x.1.bit_eq(&y.1)));
    }
}
