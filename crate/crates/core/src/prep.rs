//! Turning a flow's first packets into the fixed-length model input.
//!
//! Each packet contributes `l` bytes counted from the start of its IPv4
//! header, with the source and destination address fields zeroed in place.
//! Bytes are scaled into `[0, 1]` and the `n` segments are concatenated.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, FlowKey, FlowSampleRaw, FlowTracker, TrackerConfig};
use crate::packet::{parse_packet, LinkType, Parsed, RawRecord, IPV4_MIN_HEADER_LEN};

const SRC_ADDR: std::ops::Range<usize> = 12..16;
const DST_ADDR: std::ops::Range<usize> = 16..20;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("packet of {len} bytes is shorter than an IPv4 header")]
    TooShort { len: usize },
    #[error("sample has {got} packet entries, expected {expected}")]
    WrongPacketCount { got: usize, expected: usize },
    #[error("invalid sample config: {0}")]
    InvalidConfig(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
}

/// Window shape: `n` packets of `l` bytes each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub l: usize,
}

impl SampleConfig {
    pub const PAPER_SETUPS: [SampleConfig; 3] = [
        SampleConfig { n: 4, l: 60 },
        SampleConfig { n: 6, l: 100 },
        SampleConfig { n: 8, l: 150 },
    ];

    pub fn new(n: usize, l: usize) -> Result<Self, PrepError> {
        let cfg = Self { n, l };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        if self.n < 1 {
            return Err(PrepError::InvalidConfig("n must be at least 1".into()));
        }
        if self.l < IPV4_MIN_HEADER_LEN {
            return Err(PrepError::InvalidConfig(format!(
                "l = {} does not cover a {IPV4_MIN_HEADER_LEN}-byte IPv4 header",
                self.l
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.n * self.l
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self::PAPER_SETUPS[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleVector {
    pub values: Vec<f32>,
    pub key: FlowKey,
    pub first_ts: u64,
}

/// Copy of `ip_bytes` with both IPv4 address fields zeroed.
pub fn anonymize_packet(ip_bytes: &[u8]) -> Result<Vec<u8>, PrepError> {
    if ip_bytes.len() < IPV4_MIN_HEADER_LEN {
        return Err(PrepError::TooShort {
            len: ip_bytes.len(),
        });
    }
    let mut out = ip_bytes.to_vec();
    out[SRC_ADDR].fill(0);
    out[DST_ADDR].fill(0);
    Ok(out)
}

pub fn to_sample(raw: &FlowSampleRaw, cfg: SampleConfig) -> Result<SampleVector, PrepError> {
    if raw.packets.len() != cfg.n {
        return Err(PrepError::WrongPacketCount {
            got: raw.packets.len(),
            expected: cfg.n,
        });
    }
    let mut values = vec![0f32; cfg.input_len()];
    for (segment, packet) in values.chunks_exact_mut(cfg.l).zip(&raw.packets) {
        if packet.is_empty() {
            continue;
        }
        let anon = anonymize_packet(packet)?;
        for (v, &b) in segment.iter_mut().zip(&anon) {
            *v = f32::from(b) / 255.0;
        }
    }
    Ok(SampleVector {
        values,
        key: raw.key,
        first_ts: raw.first_ts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// Labeled training rows sharing one window shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub cfg: SampleConfig,
    pub rows: Vec<Vec<f32>>,
    pub labels: Vec<Label>,
}

pub const DATASET_MAGIC: &[u8; 4] = b"LDPD";
pub const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn new(cfg: SampleConfig) -> Self {
        Self {
            cfg,
            rows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f32>, label: Label) {
        assert_eq!(row.len(), self.cfg.input_len(), "row length must be n*l");
        self.rows.push(row);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_label(&self, label: Label) -> Vec<Vec<f32>> {
        self.rows
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(r, _)| r.clone())
            .collect()
    }

    /// Layout (all integers little-endian):
    /// `"LDPD"`, `u32` version, `u32` n, `u32` l, `u64` count, then per
    /// sample a `u8` label (0 benign, 1 anomalous) followed by `n*l` `f32`s.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PrepError> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.cfg.n as u32).to_le_bytes())?;
        w.write_all(&(self.cfg.l as u32).to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(1 + 4 * self.cfg.input_len());
        for (row, label) in self.rows.iter().zip(&self.labels) {
            buf.clear();
            buf.push(u8::from(label.is_anomalous()));
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PrepError> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)?;
        if &head[0..4] != DATASET_MAGIC {
            return Err(PrepError::Format("bad magic".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(head[at..at + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(PrepError::Format(format!("unsupported version {version}")));
        }
        let cfg = SampleConfig::new(u32_at(8) as usize, u32_at(12) as usize)?;
        let count = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        let mut ds = Dataset::new(cfg);
        let mut buf = vec![0u8; 1 + 4 * cfg.input_len()];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let label = match buf[0] {
                0 => Label::Benign,
                1 => Label::Anomalous,
                other => return Err(PrepError::Format(format!("bad label byte {other}"))),
            };
            let row = buf[1..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ds.push(row, label);
        }
        Ok(ds)
    }
}

/// Capture-clock cadence for idle-flow expiry, shared with the live engine.
pub const EXPIRE_EVERY_MICROS: u64 = 1_000_000;

/// Replay `records` through a fresh tracker and collect every sample in
/// emission order. Expiry, eviction and the final flush follow the engine.
pub fn extract_samples<'a, I>(
    records: I,
    link: LinkType,
    tracker: TrackerConfig,
    cfg: SampleConfig,
) -> Result<Vec<SampleVector>, PrepError>
where
    I: IntoIterator<Item = &'a RawRecord>,
{
    cfg.validate()?;
    if tracker.n != cfg.n {
        return Err(PrepError::InvalidConfig(format!(
            "tracker samples {} packets but the window has {}",
            tracker.n, cfg.n
        )));
    }
    let mut tracker = FlowTracker::new(tracker);
    let mut raws = Vec::new();
    let mut clock = 0u64;
    let mut next_expire = None;
    for rec in records {
        clock = clock.max(rec.ts_micros);
        match next_expire {
            None => next_expire = Some(clock + EXPIRE_EVERY_MICROS),
            Some(t) if clock >= t => {
                raws.extend(tracker.expire(clock));
                next_expire = Some(clock + EXPIRE_EVERY_MICROS);
            }
            Some(_) => {}
        }
        let Parsed::Packet(pkt) = parse_packet(rec, link) else {
            continue;
        };
        match tracker.observe(&pkt) {
            Ok(s) => raws.extend(s),
            Err(FlowError::CapacityExceeded {
                evicted, emitted, ..
            }) => raws.extend(evicted.into_iter().chain(emitted).map(|b| *b)),
        }
    }
    raws.extend(tracker.flush());
    raws.iter().map(|r| to_sample(r, cfg)).collect()
}
