//! Batch encodings for the edge-cloud uplink.
//!
//! Three base layouts (`json`, `binpack`, `delta`), each optionally wrapped in
//! a raw DEFLATE stream. All integers are little-endian.
//!
//! ```text
//! json     [{"t":<u64>,"s":"<id>","v":<f64>},...]   no whitespace
//! binpack  count:u32 dict_count:u16 (len:u16 utf8)*dict_count
//!          (ts:u64 dict_index:u32 value_bits:u64)*count
//! delta    count:u32 dict_count:u16 (len:u16 utf8)*dict_count
//!          first_ts:u64 zigzag_varint(ts[i]-ts[i-1])*(count-1)
//!          pair_count:u32 (dict_index:u32 run_len:u32)*pair_count
//!          first_bits:u64 (mask:u8 nonzero_bytes)*(count-1)
//! +deflate inflated_len:u32 raw_deflate(base_payload)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::workload::Record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodecBase {
    Json,
    Binpack,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodecId {
    pub base: CodecBase,
    pub deflate: bool,
}

impl CodecId {
    pub const JSON: CodecId = CodecId::new(CodecBase::Json, false);
    pub const JSON_DEFLATE: CodecId = CodecId::new(CodecBase::Json, true);
    pub const BINPACK: CodecId = CodecId::new(CodecBase::Binpack, false);
    pub const BINPACK_DEFLATE: CodecId = CodecId::new(CodecBase::Binpack, true);
    pub const DELTA: CodecId = CodecId::new(CodecBase::Delta, false);
    pub const DELTA_DEFLATE: CodecId = CodecId::new(CodecBase::Delta, true);

    /// The search space, in enumeration (tie-break) order.
    pub const ALL: [CodecId; 6] = [
        CodecId::JSON,
        CodecId::JSON_DEFLATE,
        CodecId::BINPACK,
        CodecId::BINPACK_DEFLATE,
        CodecId::DELTA,
        CodecId::DELTA_DEFLATE,
    ];

    pub const fn new(base: CodecBase, deflate: bool) -> Self {
        Self { base, deflate }
    }

    pub fn ordinal(self) -> usize {
        CodecId::ALL
            .iter()
            .position(|&c| c == self)
            .expect("every codec is enumerated")
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.base {
            CodecBase::Json => "json",
            CodecBase::Binpack => "binpack",
            CodecBase::Delta => "delta",
        };
        if self.deflate {
            write!(f, "{base}+deflate")
        } else {
            f.write_str(base)
        }
    }
}

impl FromStr for CodecId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CodecId::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown codec `{s}`"))
    }
}

impl Serialize for CodecId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CodecId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-message CPU cost of the injected encoder and decoder components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecCpuTable {
    pub json: f64,
    pub binpack: f64,
    pub delta: f64,
    pub deflate_extra: f64,
    pub decoder_factor: f64,
}

impl Default for CodecCpuTable {
    fn default() -> Self {
        Self {
            json: 0.00002,
            binpack: 0.00005,
            delta: 0.00012,
            deflate_extra: 0.00030,
            decoder_factor: 0.6,
        }
    }
}

impl CodecCpuTable {
    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }

    pub fn encoder(&self, codec: CodecId) -> f64 {
        let base = match codec.base {
            CodecBase::Json => self.json,
            CodecBase::Binpack => self.binpack,
            CodecBase::Delta => self.delta,
        };
        if codec.deflate {
            base + self.deflate_extra
        } else {
            base
        }
    }

    pub fn decoder(&self, codec: CodecId) -> f64 {
        self.encoder(codec) * self.decoder_factor
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_id: String,
    pub records: Vec<Record>,
}

impl Batch {
    pub fn new(source_id: impl Into<String>, records: Vec<Record>) -> Self {
        Self {
            source_id: source_id.into(),
            records,
        }
    }

    pub fn bit_eq(&self, other: &Batch) -> bool {
        self.source_id == other.source_id
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub codec: CodecId,
    pub source_id: String,
    pub payload: Vec<u8>,
    pub record_count: u32,
    /// Canonical JSON size of the same batch.
    pub raw_bytes: usize,
}

impl EncodedBatch {
    pub fn decode(&self) -> Result<Batch, DecodeError> {
        let records = decode(self.codec, &self.payload)?;
        if records.len() != self.record_count as usize {
            return Err(DecodeError::new(0, "record count does not match batch metadata"));
        }
        Ok(Batch::new(self.source_id.clone(), records))
    }

    pub fn ratio(&self) -> f64 {
        self.payload.len() as f64 / self.raw_bytes as f64
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("cannot encode an empty batch")]
    Empty,
    #[error("timestamps decrease at record {0}")]
    Unsorted(usize),
    #[error("record {0} has a non-finite value, which canonical JSON cannot carry")]
    NonFinite(usize),
    #[error("batch exceeds a format limit: {0}")]
    TooLarge(&'static str),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("decode error at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

impl DecodeError {
    fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self {
            offset,
            reason: reason.into(),
        }
    }
}

pub fn encode(codec: CodecId, batch: &Batch) -> Result<EncodedBatch, EncodeError> {
    check_batch(&batch.records)?;
    let json = json_bytes(&batch.records);
    let raw_bytes = json.len();
    let base = match codec.base {
        CodecBase::Json => {
            if let Some(i) = batch.records.iter().position(|r| !r.value.is_finite()) {
                return Err(EncodeError::NonFinite(i));
            }
            json
        }
        CodecBase::Binpack => encode_binpack(&batch.records)?,
        CodecBase::Delta => encode_delta(&batch.records)?,
    };
    let payload = if codec.deflate { deflate(&base)? } else { base };
    Ok(EncodedBatch {
        codec,
        source_id: batch.source_id.clone(),
        payload,
        record_count: batch.records.len() as u32,
        raw_bytes,
    })
}

pub fn decode(codec: CodecId, payload: &[u8]) -> Result<Vec<Record>, DecodeError> {
    let inflated;
    let base = if codec.deflate {
        inflated = inflate(payload)?;
        inflated.as_slice()
    } else {
        payload
    };
    match codec.base {
        CodecBase::Json => decode_json(base),
        CodecBase::Binpack => decode_binpack(base),
        CodecBase::Delta => decode_delta(base),
    }
}

/// Encoded size divided by the canonical JSON size of the same batch.
pub fn measure_ratio(codec: CodecId, batch: &Batch) -> Result<f64, EncodeError> {
    encode(codec, batch).map(|e| e.ratio())
}

fn check_batch(records: &[Record]) -> Result<(), EncodeError> {
    if records.is_empty() {
        return Err(EncodeError::Empty);
    }
    if u32::try_from(records.len()).is_err() {
        return Err(EncodeError::TooLarge("more than u32::MAX records"));
    }
    if let Some(i) = records.windows(2).position(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
        return Err(EncodeError::Unsorted(i + 1));
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonRecordRef<'a> {
    t: u64,
    s: &'a str,
    v: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    t: u64,
    s: String,
    v: f64,
}

/// Canonical JSON rendering. Non-finite values come out as `null`, which only
/// matters for size accounting: the json codec itself refuses them.
fn json_bytes(records: &[Record]) -> Vec<u8> {
    let rows: Vec<JsonRecordRef<'_>> = records
        .iter()
        .map(|r| JsonRecordRef {
            t: r.timestamp_ms,
            s: &r.sensor_id,
            v: r.value,
        })
        .collect();
    serde_json::to_vec(&rows).expect("records always serialize")
}

fn decode_json(payload: &[u8]) -> Result<Vec<Record>, DecodeError> {
    let rows: Vec<JsonRecord> = serde_json::from_slice(payload).map_err(|e| {
        // Canonical payloads are a single line, so the column is the byte position.
        DecodeError::new(e.column().saturating_sub(1), e.to_string())
    })?;
    if rows.is_empty() {
        return Err(DecodeError::new(0, "empty batch"));
    }
    Ok(rows.into_iter().map(|r| Record::new(r.t, r.s, r.v)).collect())
}

struct Dictionary<'a> {
    names: Vec<&'a str>,
    indices: Vec<u32>,
}

fn build_dictionary(records: &[Record]) -> Result<Dictionary<'_>, EncodeError> {
    let mut lookup: HashMap<&str, u32> = HashMap::new();
    let mut names = Vec::new();
    let mut indices = Vec::with_capacity(records.len());
    for r in records {
        let next = names.len() as u32;
        let idx = *lookup.entry(r.sensor_id.as_str()).or_insert_with(|| {
            names.push(r.sensor_id.as_str());
            next
        });
        indices.push(idx);
    }
    if names.len() > u16::MAX as usize {
        return Err(EncodeError::TooLarge("more than 65535 distinct sensor ids"));
    }
    if names.iter().any(|n| n.len() > u16::MAX as usize) {
        return Err(EncodeError::TooLarge("sensor id longer than 65535 bytes"));
    }
    Ok(Dictionary { names, indices })
}

fn write_header(out: &mut Vec<u8>, count: usize, dict: &Dictionary<'_>) {
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(dict.names.len() as u16).to_le_bytes());
    for name in &dict.names {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
}

fn encode_binpack(records: &[Record]) -> Result<Vec<u8>, EncodeError> {
    let dict = build_dictionary(records)?;
    let mut out = Vec::with_capacity(6 + records.len() * 20);
    write_header(&mut out, records.len(), &dict);
    for (r, &idx) in records.iter().zip(&dict.indices) {
        out.extend_from_slice(&r.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&idx.to_le_bytes());
        out.extend_from_slice(&r.value.to_bits().to_le_bytes());
    }
    Ok(out)
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn encode_delta(records: &[Record]) -> Result<Vec<u8>, EncodeError> {
    let dict = build_dictionary(records)?;
    let mut out = Vec::with_capacity(32 + records.len() * 4);
    write_header(&mut out, records.len(), &dict);

    out.extend_from_slice(&records[0].timestamp_ms.to_le_bytes());
    for w in records.windows(2) {
        write_varint(
            &mut out,
            zigzag(w[1].timestamp_ms.wrapping_sub(w[0].timestamp_ms) as i64),
        );
    }

    let mut runs: Vec<(u32, u32)> = Vec::new();
    for &idx in &dict.indices {
        match runs.last_mut() {
            Some((last, len)) if *last == idx => *len += 1,
            _ => runs.push((idx, 1)),
        }
    }
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for (idx, len) in runs {
        out.extend_from_slice(&idx.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
    }

    let mut prev = records[0].value.to_bits();
    out.extend_from_slice(&prev.to_le_bytes());
    for r in &records[1..] {
        let bits = r.value.to_bits();
        let residue = (bits ^ prev).to_le_bytes();
        let mask = residue
            .iter()
            .enumerate()
            .fold(0u8, |m, (i, &b)| if b != 0 { m | (1 << i) } else { m });
        out.push(mask);
        out.extend(residue.iter().copied().filter(|&b| b != 0));
        prev = bits;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DecodeError::new(self.pos, format!("truncated: need {n} more bytes")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        self.array().map(u64::from_le_bytes)
    }

    fn varint(&mut self) -> Result<u64, DecodeError> {
        let start = self.pos;
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(DecodeError::new(start, "varint longer than 10 bytes"))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::new(self.pos, "trailing bytes after payload"));
        }
        Ok(())
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(usize, Vec<String>), DecodeError> {
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(DecodeError::new(0, "empty batch"));
    }
    let dict_count = r.u16()? as usize;
    let mut names = Vec::with_capacity(dict_count);
    for _ in 0..dict_count {
        let len = r.u16()? as usize;
        let at = r.pos;
        let bytes = r.take(len)?;
        let name = std::str::from_utf8(bytes).map_err(|_| DecodeError::new(at, "sensor id is not UTF-8"))?;
        names.push(name.to_string());
    }
    Ok((count, names))
}

fn lookup(names: &[String], idx: u32, at: usize) -> Result<&str, DecodeError> {
    names
        .get(idx as usize)
        .map(String::as_str)
        .ok_or_else(|| DecodeError::new(at, format!("dictionary index {idx} out of range")))
}

fn decode_binpack(payload: &[u8]) -> Result<Vec<Record>, DecodeError> {
    let mut r = Reader::new(payload);
    let (count, names) = read_header(&mut r)?;
    // Reject impossible counts before allocating.
    if count > payload.len() / 20 {
        return Err(DecodeError::new(0, "record count exceeds payload size"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ts = r.u64()?;
        let at = r.pos;
        let idx = r.u32()?;
        let value = f64::from_bits(r.u64()?);
        out.push(Record::new(ts, lookup(&names, idx, at)?, value));
    }
    r.finish()?;
    Ok(out)
}

fn decode_delta(payload: &[u8]) -> Result<Vec<Record>, DecodeError> {
    let mut r = Reader::new(payload);
    let (count, names) = read_header(&mut r)?;
    if count > payload.len() {
        return Err(DecodeError::new(0, "record count exceeds payload size"));
    }

    let mut timestamps = Vec::with_capacity(count);
    let mut ts = r.u64()?;
    timestamps.push(ts);
    for _ in 1..count {
        let at = r.pos;
        let delta = unzigzag(r.varint()?);
        if delta < 0 {
            return Err(DecodeError::new(at, "negative timestamp delta"));
        }
        ts = ts
            .checked_add(delta as u64)
            .ok_or_else(|| DecodeError::new(at, "timestamp overflow"))?;
        timestamps.push(ts);
    }

    let pair_start = r.pos;
    let pairs = r.u32()? as usize;
    if pairs == 0 || pairs > count {
        return Err(DecodeError::new(pair_start, "bad run-length pair count"));
    }
    let mut ids: Vec<&str> = Vec::with_capacity(count);
    for _ in 0..pairs {
        let at = r.pos;
        let idx = r.u32()?;
        let len = r.u32()? as usize;
        if len == 0 || ids.len() + len > count {
            return Err(DecodeError::new(at, "run lengths do not sum to the record count"));
        }
        let name = lookup(&names, idx, at)?;
        ids.extend(std::iter::repeat_n(name, len));
    }
    if ids.len() != count {
        return Err(DecodeError::new(r.pos, "run lengths do not sum to the record count"));
    }

    let mut bits = r.u64()?;
    let mut values = Vec::with_capacity(count);
    values.push(f64::from_bits(bits));
    for _ in 1..count {
        let mask = r.u8()?;
        let mut residue = [0u8; 8];
        for (i, byte) in residue.iter_mut().enumerate() {
            if mask & (1 << i) != 0 {
                *byte = r.u8()?;
                if *byte == 0 {
                    return Err(DecodeError::new(r.pos - 1, "zero byte flagged as nonzero"));
                }
            }
        }
        bits ^= u64::from_le_bytes(residue);
        values.push(f64::from_bits(bits));
    }
    r.finish()?;

    Ok(timestamps
        .into_iter()
        .zip(ids)
        .zip(values)
        .map(|((t, s), v)| Record::new(t, s, v))
        .collect())
}

fn deflate(base: &[u8]) -> Result<Vec<u8>, EncodeError> {
    let len = u32::try_from(base.len()).map_err(|_| EncodeError::TooLarge("payload above 4 GiB"))?;
    let mut out = len.to_le_bytes().to_vec();
    let mut enc = DeflateEncoder::new(out.split_off(4), Compression::default());
    enc.write_all(base).expect("writing to a Vec cannot fail");
    let stream = enc.finish().expect("writing to a Vec cannot fail");
    out.extend_from_slice(&stream);
    Ok(out)
}

fn inflate(payload: &[u8]) -> Result<Vec<u8>, DecodeError> {
    let mut r = Reader::new(payload);
    let len = r.u32()? as usize;
    let mut out = Vec::with_capacity(len.min(1 << 24));
    DeflateDecoder::new(&payload[4..])
        .take(len as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| DecodeError::new(4, format!("corrupt deflate stream: {e}")))?;
    if out.len() != len {
        return Err(DecodeError::new(
            0,
            format!("inflated {} bytes, header says {len}", out.len()),
        ));
    }
    Ok(out)
}
