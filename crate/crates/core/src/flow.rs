//! Unidirectional 5-tuple flow tracking and first-n-packet sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{ParsedPacket, TCP_FIN, TCP_RST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

/// Project a packet onto its (directional) 5-tuple.
pub fn flow_key(pkt: &ParsedPacket) -> FlowKey {
    FlowKey {
        src_ip: pkt.src_ip,
        dst_ip: pkt.dst_ip,
        src_port: pkt.src_port,
        dst_port: pkt.dst_port,
        protocol: pkt.protocol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowStatus {
    Collecting,
    Sampled,
    Expired,
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub key: FlowKey,
    pub packets: Vec<Vec<u8>>,
    pub first_ts: u64,
    pub last_ts: u64,
    pub status: FlowStatus,
    seq: u64,
}

/// The first `n` packets of a flow. Entries past `real_count` are empty padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSampleRaw {
    pub key: FlowKey,
    pub packets: Vec<Vec<u8>>,
    pub real_count: usize,
    pub first_ts: u64,
}

impl FlowSampleRaw {
    fn from_state(state: &FlowState, n: usize) -> Self {
        let mut packets = state.packets.clone();
        packets.resize(n, Vec::new());
        Self {
            key: state.key,
            real_count: state.packets.len(),
            packets,
            first_ts: state.first_ts,
        }
    }
}

/// An IPv4 network in CIDR notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ipv4Net {
    pub addr: Ipv4Addr,
    pub prefix: u8,
}

impl Ipv4Net {
    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        let mask = if self.prefix == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(self.prefix))
        };
        u32::from(ip) & mask == u32::from(self.addr) & mask
    }
}

impl FromStr for Ipv4Net {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, prefix) = match s.split_once('/') {
            Some((a, p)) => (
                a,
                p.parse::<u8>()
                    .map_err(|_| format!("bad prefix in {s:?}"))?,
            ),
            None => (s, 32),
        };
        if prefix > 32 {
            return Err(format!("prefix out of range in {s:?}"));
        }
        let addr = addr
            .parse::<Ipv4Addr>()
            .map_err(|_| format!("bad address in {s:?}"))?;
        Ok(Self { addr, prefix })
    }
}

impl TryFrom<String> for Ipv4Net {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ipv4Net> for String {
    fn from(n: Ipv4Net) -> String {
        n.to_string()
    }
}

impl fmt::Display for Ipv4Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

/// Which traffic directions are sampled, relative to the local networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[serde(rename = "in")]
    Inbound,
    #[serde(rename = "out")]
    Outbound,
    #[default]
    Both,
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in" => Ok(Direction::Inbound),
            "out" => Ok(Direction::Outbound),
            "both" => Ok(Direction::Both),
            other => Err(format!(
                "unknown direction {other:?} (expected in, out or both)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DirectionFilter {
    pub direction: Direction,
    pub local_nets: Vec<Ipv4Net>,
}

impl DirectionFilter {
    fn is_local(&self, ip: Ipv4Addr) -> bool {
        self.local_nets.iter().any(|n| n.contains(ip))
    }

    pub fn accepts(&self, key: &FlowKey) -> bool {
        match self.direction {
            Direction::Both => true,
            Direction::Inbound => self.is_local(key.dst_ip) && !self.is_local(key.src_ip),
            Direction::Outbound => self.is_local(key.src_ip),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Packets per sample.
    pub n: usize,
    pub idle_timeout_micros: u64,
    pub max_flows: usize,
    pub filter: DirectionFilter,
}

impl TrackerConfig {
    pub const DEFAULT_IDLE_TIMEOUT_MICROS: u64 = 60_000_000;
    pub const DEFAULT_MAX_FLOWS: usize = 65_536;

    pub fn new(n: usize) -> Self {
        Self {
            n,
            idle_timeout_micros: Self::DEFAULT_IDLE_TIMEOUT_MICROS,
            max_flows: Self::DEFAULT_MAX_FLOWS,
            filter: DirectionFilter::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    /// The table was full. The packet was still accepted; `evicted` is the
    /// oldest collecting flow emitted early and `emitted` is any sample the
    /// packet itself completed.
    #[error("flow table at capacity ({capacity} flows); oldest flow evicted")]
    CapacityExceeded {
        capacity: usize,
        evicted: Option<Box<FlowSampleRaw>>,
        emitted: Option<Box<FlowSampleRaw>>,
    },
}

/// Single-writer flow table.
#[derive(Debug)]
pub struct FlowTracker {
    cfg: TrackerConfig,
    flows: HashMap<FlowKey, FlowState>,
    collecting: BTreeMap<(u64, u64), FlowKey>,
    sampled: BTreeMap<(u64, u64), FlowKey>,
    next_seq: u64,
    observed: u64,
}

impl FlowTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        assert!(cfg.n >= 1, "packets per sample must be at least 1");
        assert!(cfg.max_flows >= 1, "flow table needs room for one flow");
        Self {
            cfg,
            flows: HashMap::new(),
            collecting: BTreeMap::new(),
            sampled: BTreeMap::new(),
            next_seq: 0,
            observed: 0,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn open_flows(&self) -> usize {
        self.flows.len()
    }

    /// Tracked packets accepted so far.
    pub fn observed_packets(&self) -> u64 {
        self.observed
    }

    fn evict_oldest(&mut self) -> Option<FlowSampleRaw> {
        if let Some((&order, &key)) = self.collecting.iter().next() {
            self.collecting.remove(&order);
            let mut state = self.flows.remove(&key).expect("indexed flow exists");
            state.status = FlowStatus::Expired;
            return Some(FlowSampleRaw::from_state(&state, self.cfg.n));
        }
        if let Some((&order, &key)) = self.sampled.iter().next() {
            self.sampled.remove(&order);
            self.flows.remove(&key);
        }
        None
    }

    /// Feed one packet. Returns a sample when the packet completes its flow's window.
    pub fn observe(&mut self, pkt: &ParsedPacket) -> Result<Option<FlowSampleRaw>, FlowError> {
        if !pkt.is_tracked() {
            return Ok(None);
        }
        let key = flow_key(pkt);
        if !self.cfg.filter.accepts(&key) {
            return Ok(None);
        }
        self.observed += 1;

        let mut evicted = None;
        let mut pressure = false;
        if !self.flows.contains_key(&key) {
            if self.flows.len() >= self.cfg.max_flows {
                pressure = true;
                evicted = self.evict_oldest();
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            self.flows.insert(
                key,
                FlowState {
                    key,
                    packets: Vec::with_capacity(self.cfg.n),
                    first_ts: pkt.ts_micros,
                    last_ts: pkt.ts_micros,
                    status: FlowStatus::Collecting,
                    seq,
                },
            );
            self.collecting.insert((pkt.ts_micros, seq), key);
        }

        let n = self.cfg.n;
        let state = self.flows.get_mut(&key).expect("flow inserted above");
        state.last_ts = state.last_ts.max(pkt.ts_micros);
        let emitted = if state.status == FlowStatus::Collecting {
            state.packets.push(pkt.ip_total_bytes.clone());
            let closing = pkt.has_tcp_flag(TCP_FIN) || pkt.has_tcp_flag(TCP_RST);
            if state.packets.len() >= n || closing {
                state.status = FlowStatus::Sampled;
                let order = (state.first_ts, state.seq);
                let sample = FlowSampleRaw::from_state(state, n);
                state.packets = Vec::new();
                self.collecting.remove(&order);
                self.sampled.insert(order, key);
                Some(sample)
            } else {
                None
            }
        } else {
            None
        };

        if pressure {
            return Err(FlowError::CapacityExceeded {
                capacity: self.cfg.max_flows,
                evicted: evicted.map(Box::new),
                emitted: emitted.map(Box::new),
            });
        }
        Ok(emitted)
    }

    /// Emit collecting flows idle for longer than the timeout; drop idle sampled flows.
    pub fn expire(&mut self, now: u64) -> Vec<FlowSampleRaw> {
        let timeout = self.cfg.idle_timeout_micros;
        let idle = |s: &FlowState| now.saturating_sub(s.last_ts) > timeout;
        self.drain_where(idle)
    }

    /// Emit every collecting flow regardless of age (end of a replay).
    pub fn flush(&mut self) -> Vec<FlowSampleRaw> {
        self.drain_where(|_| true)
    }

    fn drain_where(&mut self, pred: impl Fn(&FlowState) -> bool) -> Vec<FlowSampleRaw> {
        let mut out = Vec::new();
        let doomed: Vec<(u64, u64)> = self
            .collecting
            .iter()
            .filter(|(_, k)| pred(&self.flows[*k]))
            .map(|(o, _)| *o)
            .collect();
        for order in doomed {
            let key = self.collecting.remove(&order).expect("order listed above");
            let mut state = self.flows.remove(&key).expect("indexed flow exists");
            state.status = FlowStatus::Expired;
            out.push(FlowSampleRaw::from_state(&state, self.cfg.n));
        }
        let stale: Vec<(u64, u64)> = self
            .sampled
            .iter()
            .filter(|(_, k)| pred(&self.flows[*k]))
            .map(|(o, _)| *o)
            .collect();
        for order in stale {
            let key = self.sampled.remove(&order).expect("order listed above");
            self.flows.remove(&key);
        }
        out
    }
}
