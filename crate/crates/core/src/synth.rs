//! Seeded traffic generation: benign web conversations and four flood kinds.
//!
//! The capture point sits at the edge of the server network. Benign clients
//! live in an outside pool and talk to local servers over HTTP or a TLS-like
//! record stream, sometimes after a DNS lookup at the local resolver. Each
//! flood comes from one attacker address outside both pools.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Ipv4Net;
use crate::packet::{
    PcapError, RawRecord, ETHERNET_HEADER_LEN, ETHERTYPE_IPV4, IPV4_MIN_HEADER_LEN, PROTO_TCP,
    PROTO_UDP, TCP_ACK, TCP_FIN, TCP_PSH, TCP_RST, TCP_SYN,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("unknown flood kind {0:?} (expected dns, http, udp or syn)")]
    UnknownKind(String),
    #[error("labels file line {line}: {reason}")]
    Labels { line: usize, reason: String },
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("synth i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &str, reason: impl Into<String>) -> SynthError {
    SynthError::ConfigInvalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// 2023-11-14T22:13:20Z, an arbitrary fixed capture start.
pub const DEFAULT_START_MICROS: u64 = 1_700_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloodKind {
    Dns,
    Http,
    Udp,
    Syn,
}

impl FloodKind {
    pub const ALL: [FloodKind; 4] = [
        FloodKind::Syn,
        FloodKind::Udp,
        FloodKind::Dns,
        FloodKind::Http,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FloodKind::Dns => "dns",
            FloodKind::Http => "http",
            FloodKind::Udp => "udp",
            FloodKind::Syn => "syn",
        }
    }

    /// Class written to the labels sidecar.
    pub fn class(self) -> String {
        format!("{}_flood", self.name())
    }
}

impl fmt::Display for FloodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FloodKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FloodKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| SynthError::UnknownKind(s.to_string()))
    }
}

/// Shape of benign conversation content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayloadProfile {
    /// Share of conversations that carry TLS-like records on port 443.
    pub tls_fraction: f64,
    /// Share of conversations preceded by a DNS lookup.
    pub dns_fraction: f64,
    pub min_body: usize,
    pub max_body: usize,
    /// Request/response exchanges per connection, drawn from `1..=max_exchanges`.
    pub max_exchanges: usize,
}

impl Default for PayloadProfile {
    fn default() -> Self {
        Self {
            tls_fraction: 0.5,
            dns_fraction: 0.3,
            min_body: 200,
            max_body: 16_000,
            max_exchanges: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenignConfig {
    /// TCP conversations to generate.
    pub flow_count: usize,
    /// Further conversations from the same hosts, written as a separate capture.
    pub holdout_flows: usize,
    pub clients: usize,
    pub servers: usize,
    pub client_net: Ipv4Net,
    pub server_net: Ipv4Net,
    pub resolver: Ipv4Addr,
    pub payload: PayloadProfile,
    /// Mean gap between conversation starts.
    pub mean_gap_micros: u64,
    pub start_micros: u64,
}

impl Default for BenignConfig {
    fn default() -> Self {
        Self {
            flow_count: 2000,
            holdout_flows: 500,
            clients: 64,
            servers: 8,
            client_net: Ipv4Net {
                addr: Ipv4Addr::new(172, 16, 0, 0),
                prefix: 16,
            },
            server_net: Ipv4Net {
                addr: Ipv4Addr::new(10, 0, 0, 0),
                prefix: 24,
            },
            resolver: Ipv4Addr::new(10, 0, 0, 53),
            payload: PayloadProfile::default(),
            mean_gap_micros: 20_000,
            start_micros: DEFAULT_START_MICROS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloodConfig {
    pub kind: FloodKind,
    pub packet_count: usize,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    /// Packets per second.
    #[serde(default = "FloodConfig::default_rate")]
    pub rate: f64,
    #[serde(default = "FloodConfig::default_start")]
    pub start_micros: u64,
}

impl FloodConfig {
    fn default_rate() -> f64 {
        1000.0
    }

    fn default_start() -> u64 {
        DEFAULT_START_MICROS
    }

    pub fn new(kind: FloodKind, packet_count: usize, src_ip: Ipv4Addr, dst_ip: Ipv4Addr) -> Self {
        Self {
            kind,
            packet_count,
            src_ip,
            dst_ip,
            rate: Self::default_rate(),
            start_micros: Self::default_start(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.packet_count < 1 {
            return Err(invalid("packet_count", "must be at least 1"));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(invalid(
                "rate",
                format!("{} is not a positive rate", self.rate),
            ));
        }
        for (field, ip) in [("src_ip", self.src_ip), ("dst_ip", self.dst_ip)] {
            if ip.is_unspecified() || ip.is_broadcast() || ip.is_multicast() {
                return Err(invalid(field, format!("{ip} is not a host address")));
            }
        }
        if self.src_ip == self.dst_ip {
            return Err(invalid("src_ip", "equals dst_ip"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub benign: BenignConfig,
    pub floods: Vec<FloodConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let victim = Ipv4Addr::new(10, 0, 0, 10);
        let floods = FloodKind::ALL
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                FloodConfig::new(kind, 5000, Ipv4Addr::new(203, 0, 113, 10 + i as u8), victim)
            })
            .collect();
        Self {
            seed: 7,
            benign: BenignConfig::default(),
            floods,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.benign.validate()?;
        for (i, f) in self.floods.iter().enumerate() {
            f.validate().map_err(|e| match e {
                SynthError::ConfigInvalid { field, reason } => {
                    invalid(&format!("floods[{i}].{field}"), reason)
                }
                other => other,
            })?;
            if self.benign.client_net.contains(f.src_ip) {
                return Err(invalid(
                    &format!("floods[{i}].src_ip"),
                    format!("{} lies in the benign client pool", f.src_ip),
                ));
            }
            if self.benign.server_net.contains(f.src_ip) {
                return Err(invalid(
                    &format!("floods[{i}].src_ip"),
                    format!("{} lies in the server network", f.src_ip),
                ));
            }
        }
        Ok(())
    }

    /// Independent seed for the `index`-th flood.
    pub fn flood_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
    }
}

/// The `index`-th host address of `net` (skipping the network address).
fn nth_host(net: &Ipv4Net, index: u32) -> Ipv4Addr {
    let mask = if net.prefix == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(net.prefix))
    };
    Ipv4Addr::from((u32::from(net.addr) & mask) + 1 + index)
}

fn host_capacity(net: &Ipv4Net) -> u64 {
    (1u64 << (32 - u32::from(net.prefix))).saturating_sub(2)
}

impl BenignConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, v) in [
            ("benign.flow_count", self.flow_count),
            ("benign.clients", self.clients),
            ("benign.servers", self.servers),
            ("benign.payload.max_exchanges", self.payload.max_exchanges),
            ("benign.payload.min_body", self.payload.min_body),
        ] {
            if v < 1 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.clients as u64 > host_capacity(&self.client_net) {
            return Err(invalid(
                "benign.clients",
                format!("{} clients do not fit in {}", self.clients, self.client_net),
            ));
        }
        // servers start at the tenth host and step around the resolver
        if self.servers as u64 + 10 > host_capacity(&self.server_net) {
            return Err(invalid(
                "benign.servers",
                format!("{} servers do not fit in {}", self.servers, self.server_net),
            ));
        }
        if self.client_net.contains(self.server_net.addr)
            || self.server_net.contains(self.client_net.addr)
        {
            return Err(invalid("benign.client_net", "overlaps the server network"));
        }
        if !self.server_net.contains(self.resolver) {
            return Err(invalid(
                "benign.resolver",
                "must be inside the server network",
            ));
        }
        for (field, p) in [
            ("benign.payload.tls_fraction", self.payload.tls_fraction),
            ("benign.payload.dns_fraction", self.payload.dns_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(field, format!("{p} is outside [0, 1]")));
            }
        }
        if self.payload.min_body > self.payload.max_body {
            return Err(invalid("benign.payload.min_body", "exceeds max_body"));
        }
        if self.mean_gap_micros < 1 {
            return Err(invalid("benign.mean_gap_micros", "must be positive"));
        }
        Ok(())
    }

    pub fn client_ips(&self) -> Vec<Ipv4Addr> {
        (0..self.clients as u32)
            .map(|i| nth_host(&self.client_net, i))
            .collect()
    }

    pub fn server_ips(&self) -> Vec<Ipv4Addr> {
        let mut out = Vec::with_capacity(self.servers);
        let mut i = 9;
        while out.len() < self.servers {
            let ip = nth_host(&self.server_net, i);
            if ip != self.resolver {
                out.push(ip);
            }
            i += 1;
        }
        out
    }
}

/// RFC 1071 ones-complement sum over `parts`, treated as one byte stream.
pub fn internet_checksum(parts: &[&[u8]]) -> u16 {
    let mut sum = 0u32;
    let mut odd: Option<u8> = None;
    for part in parts {
        for &b in *part {
            match odd.take() {
                Some(hi) => sum += u32::from(u16::from_be_bytes([hi, b])),
                None => odd = Some(b),
            }
        }
    }
    if let Some(hi) = odd {
        sum += u32::from(hi) << 8;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

const ETH_MIN_FRAME: usize = 60;
const GATEWAY_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];

fn host_mac(ip: Ipv4Addr) -> [u8; 6] {
    let o = ip.octets();
    [0x02, 0x00, o[0], o[1], o[2], o[3]]
}

/// IPv4 header fields chosen by the sending stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpFields {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub ttl: u8,
    pub id: u16,
    pub dont_fragment: bool,
}

/// Ethernet frame around an IPv4 packet carrying `l4`, padded to the wire minimum.
pub fn ipv4_frame(ip: &IpFields, protocol: u8, l4: &[u8], local: Ipv4Net) -> Vec<u8> {
    let total = IPV4_MIN_HEADER_LEN + l4.len();
    let mut f = Vec::with_capacity((ETHERNET_HEADER_LEN + total).max(ETH_MIN_FRAME));
    let mac = |a: Ipv4Addr| {
        if local.contains(a) {
            host_mac(a)
        } else {
            GATEWAY_MAC
        }
    };
    f.extend_from_slice(&mac(ip.dst));
    f.extend_from_slice(&mac(ip.src));
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    let mut h = [0u8; IPV4_MIN_HEADER_LEN];
    h[0] = 0x45;
    h[2..4].copy_from_slice(&(total as u16).to_be_bytes());
    h[4..6].copy_from_slice(&ip.id.to_be_bytes());
    if ip.dont_fragment {
        h[6] = 0x40;
    }
    h[8] = ip.ttl;
    h[9] = protocol;
    h[12..16].copy_from_slice(&ip.src.octets());
    h[16..20].copy_from_slice(&ip.dst.octets());
    let c = internet_checksum(&[&h]);
    h[10..12].copy_from_slice(&c.to_be_bytes());
    f.extend_from_slice(&h);
    f.extend_from_slice(l4);
    if f.len() < ETH_MIN_FRAME {
        f.resize(ETH_MIN_FRAME, 0);
    }
    f
}

fn pseudo_header(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, len: usize) -> [u8; 12] {
    let mut p = [0u8; 12];
    p[0..4].copy_from_slice(&src.octets());
    p[4..8].copy_from_slice(&dst.octets());
    p[9] = protocol;
    p[10..12].copy_from_slice(&(len as u16).to_be_bytes());
    p
}

/// TCP header fields for one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpFields<'a> {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
    /// Raw option bytes; padded with zeros to a multiple of four.
    pub options: &'a [u8],
}

pub fn tcp_segment(src: Ipv4Addr, dst: Ipv4Addr, t: &TcpFields<'_>, payload: &[u8]) -> Vec<u8> {
    let opt_len = t.options.len().div_ceil(4) * 4;
    let hlen = 20 + opt_len;
    let mut s = vec![0u8; hlen];
    s[0..2].copy_from_slice(&t.src_port.to_be_bytes());
    s[2..4].copy_from_slice(&t.dst_port.to_be_bytes());
    s[4..8].copy_from_slice(&t.seq.to_be_bytes());
    s[8..12].copy_from_slice(&t.ack.to_be_bytes());
    s[12] = ((hlen / 4) as u8) << 4;
    s[13] = t.flags;
    s[14..16].copy_from_slice(&t.window.to_be_bytes());
    s[20..20 + t.options.len()].copy_from_slice(t.options);
    s.extend_from_slice(payload);
    let c = internet_checksum(&[&pseudo_header(src, dst, PROTO_TCP, s.len()), &s]);
    s[16..18].copy_from_slice(&c.to_be_bytes());
    s
}

pub fn udp_datagram(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    payload: &[u8],
) -> Vec<u8> {
    let len = 8 + payload.len();
    let mut d = Vec::with_capacity(len);
    d.extend_from_slice(&src_port.to_be_bytes());
    d.extend_from_slice(&dst_port.to_be_bytes());
    d.extend_from_slice(&(len as u16).to_be_bytes());
    d.extend_from_slice(&[0, 0]);
    d.extend_from_slice(payload);
    let mut c = internet_checksum(&[&pseudo_header(src, dst, PROTO_UDP, len), &d]);
    if c == 0 {
        c = 0xffff;
    }
    d[6..8].copy_from_slice(&c.to_be_bytes());
    d
}

/// Host TCP/IP fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stack {
    Linux,
    Windows,
    /// Minimal embedded stack typical of flood bots: MSS-only SYN options.
    Bot,
}

impl Stack {
    fn initial_ttl(self) -> u8 {
        match self {
            Stack::Linux | Stack::Bot => 64,
            Stack::Windows => 128,
        }
    }

    fn ephemeral_range(self) -> (u16, u16) {
        match self {
            Stack::Linux | Stack::Bot => (32768, 60999),
            Stack::Windows => (49152, 65535),
        }
    }

    fn offers_timestamps(self) -> bool {
        self == Stack::Linux
    }

    fn syn_window(self) -> u16 {
        match self {
            Stack::Linux | Stack::Windows => 64240,
            Stack::Bot => 5840,
        }
    }
}

const MSS: u16 = 1460;

fn syn_options(stack: Stack, tsval: u32, tsecr: u32, server: bool, peer_ts: bool) -> Vec<u8> {
    let mut o = vec![2, 4];
    o.extend_from_slice(&MSS.to_be_bytes());
    match stack {
        Stack::Bot => {}
        Stack::Linux if !server || peer_ts => {
            o.extend_from_slice(&[4, 2, 8, 10]);
            o.extend_from_slice(&tsval.to_be_bytes());
            o.extend_from_slice(&tsecr.to_be_bytes());
            o.extend_from_slice(&[1, 3, 3, 7]);
        }
        Stack::Linux | Stack::Windows => o.extend_from_slice(&[1, 3, 3, 8, 1, 1, 4, 2]),
    }
    o
}

fn ts_options(tsval: u32, tsecr: u32) -> Vec<u8> {
    let mut o = vec![1, 1, 8, 10];
    o.extend_from_slice(&tsval.to_be_bytes());
    o.extend_from_slice(&tsecr.to_be_bytes());
    o
}

/// One side of a TCP connection or UDP socket.
#[derive(Debug, Clone)]
struct Endpoint {
    ip: Ipv4Addr,
    port: u16,
    stack: Stack,
    ttl: u8,
    ip_id: u16,
    random_id: bool,
    df: bool,
    seq: u32,
    window: u16,
    ts_base: u32,
    last_tsval: u32,
}

impl Endpoint {
    fn new(rng: &mut ChaCha8Rng, ip: Ipv4Addr, port: u16, stack: Stack, hops: u8) -> Self {
        let window = match stack {
            Stack::Linux => rng.random_range(490..=512),
            Stack::Windows => rng.random_range(513..=2053),
            Stack::Bot => 5840,
        };
        Self {
            ip,
            port,
            stack,
            ttl: stack.initial_ttl() - hops,
            ip_id: rng.random(),
            random_id: stack == Stack::Bot,
            df: stack != Stack::Bot,
            seq: rng.random(),
            window,
            ts_base: rng.random(),
            last_tsval: 0,
        }
    }

    fn next_ip(&mut self, rng: &mut ChaCha8Rng, dst: Ipv4Addr) -> IpFields {
        let id = if self.random_id {
            rng.random()
        } else {
            self.ip_id = self.ip_id.wrapping_add(1);
            self.ip_id
        };
        IpFields {
            src: self.ip,
            dst,
            ttl: self.ttl,
            id,
            dont_fragment: self.df,
        }
    }

    fn tsval(&mut self, t: u64) -> u32 {
        self.last_tsval = self.ts_base.wrapping_add((t / 1000) as u32);
        self.last_tsval
    }
}

/// Accumulates frames as `(timestamp, order, frame)` so a stable sort
/// restores capture order.
struct Emitter<'r> {
    rng: &'r mut ChaCha8Rng,
    local: Ipv4Net,
    out: Vec<(u64, Vec<u8>)>,
}

impl Emitter<'_> {
    fn push(&mut self, t: u64, frame: Vec<u8>) {
        self.out.push((t, frame));
    }

    fn udp(&mut self, t: u64, from: &mut Endpoint, to: &Endpoint, payload: &[u8]) {
        let ip = from.next_ip(self.rng, to.ip);
        let d = udp_datagram(from.ip, to.ip, from.port, to.port, payload);
        let f = ipv4_frame(&ip, PROTO_UDP, &d, self.local);
        self.push(t, f);
    }
}

/// A TCP connection between client `c` and server `s`.
struct Conn {
    c: Endpoint,
    s: Endpoint,
    timestamps: bool,
}

impl Conn {
    fn new(c: Endpoint, s: Endpoint) -> Self {
        let timestamps = c.stack.offers_timestamps() && s.stack.offers_timestamps();
        Self { c, s, timestamps }
    }

    fn mss(&self) -> usize {
        usize::from(MSS) - if self.timestamps { 12 } else { 0 }
    }

    fn send(&mut self, em: &mut Emitter<'_>, t: u64, from_client: bool, flags: u8, payload: &[u8]) {
        let timestamps = self.timestamps;
        let (from, to) = if from_client {
            (&mut self.c, &mut self.s)
        } else {
            (&mut self.s, &mut self.c)
        };
        let ack = if flags & TCP_ACK != 0 { to.seq } else { 0 };
        let options = if flags & TCP_SYN != 0 {
            let tsval = from.tsval(t);
            syn_options(
                from.stack,
                tsval,
                to.last_tsval,
                !from_client,
                to.stack.offers_timestamps(),
            )
        } else if timestamps {
            let tsval = from.tsval(t);
            ts_options(tsval, to.last_tsval)
        } else {
            Vec::new()
        };
        let window = if flags & TCP_SYN != 0 {
            if from_client {
                from.stack.syn_window()
            } else {
                65160
            }
        } else {
            from.window
        };
        let fields = TcpFields {
            src_port: from.port,
            dst_port: to.port,
            seq: from.seq,
            ack,
            flags,
            window,
            options: &options,
        };
        let seg = tcp_segment(from.ip, to.ip, &fields, payload);
        let ip = from.next_ip(em.rng, to.ip);
        let frame = ipv4_frame(&ip, PROTO_TCP, &seg, em.local);
        let consumed = payload.len() + usize::from(flags & (TCP_SYN | TCP_FIN) != 0);
        from.seq = from.seq.wrapping_add(consumed as u32);
        em.push(t, frame);
    }

    /// SYN, SYN-ACK, ACK. Returns the time of the final ACK.
    fn handshake(&mut self, em: &mut Emitter<'_>, t: u64, rtt: u64, proc: u64) -> u64 {
        self.send(em, t, true, TCP_SYN, &[]);
        self.send(em, t + proc, false, TCP_SYN | TCP_ACK, &[]);
        let t = t + proc + rtt;
        self.send(em, t, true, TCP_ACK, &[]);
        t
    }

    /// Send `msg` split at the MSS. The receiver ACKs every second segment
    /// and the last one, one round trip later. Returns the last send time.
    fn message(
        &mut self,
        em: &mut Emitter<'_>,
        t: u64,
        from_client: bool,
        msg: &[u8],
        rtt: u64,
        gap: u64,
    ) -> u64 {
        let mss = self.mss();
        let chunks: Vec<&[u8]> = msg.chunks(mss).collect();
        let mut now = t;
        for (i, chunk) in chunks.iter().enumerate() {
            let last = i + 1 == chunks.len();
            let flags = if last { TCP_PSH | TCP_ACK } else { TCP_ACK };
            self.send(em, now, from_client, flags, chunk);
            if i % 2 == 1 || last {
                self.send(em, now + rtt, !from_client, TCP_ACK, &[]);
            }
            now += gap;
        }
        now
    }
}

fn jitter(rng: &mut ChaCha8Rng, lo: u64, hi: u64) -> u64 {
    rng.random_range(lo..=hi)
}

/// Log-uniform integer in `[lo, hi]`.
fn log_uniform(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if lo >= hi {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (rng.random_range(a..=b).exp().round() as usize).clamp(lo, hi)
}

const HOST_NAMES: [&str; 12] = [
    "www.example.com",
    "api.example.net",
    "cdn.example.org",
    "static.example.com",
    "mail.example.net",
    "news.example.org",
    "shop.example.com",
    "docs.example.net",
    "img.example.org",
    "auth.example.com",
    "blog.example.net",
    "media.example.org",
];

const WORDS: [&str; 24] = [
    "alpha", "river", "stone", "cloud", "maple", "orbit", "pixel", "delta", "ember", "frost",
    "glade", "harbor", "island", "jungle", "kernel", "lemon", "meadow", "nectar", "ocean",
    "prairie", "quartz", "ridge", "summit", "tundra",
];

const USER_AGENTS: [&str; 5] = [
    "Mozilla/5.0 (X11; Linux x86_64; rv:118.0) Gecko/20100101 Firefox/118.0",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.0.0 Safari/537.36",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.0.0 Safari/537.36 Edg/118.0.2088.46",
    "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/117.0.0.0 Safari/537.36",
    "curl/8.4.0",
];

fn random_path(rng: &mut ChaCha8Rng) -> (String, &'static str) {
    let w = *WORDS.choose(rng).expect("non-empty");
    match rng.random_range(0..7) {
        0 => ("/".into(), "text/html"),
        1 => ("/index.html".into(), "text/html"),
        2 => (
            format!("/api/v1/items/{}", rng.random_range(1..5000)),
            "application/json",
        ),
        3 => (
            format!("/static/js/app.{:08x}.js", rng.random::<u32>()),
            "application/javascript",
        ),
        4 => (format!("/images/{w}.png"), "image/png"),
        5 => (format!("/search?q={w}"), "text/html"),
        _ => (
            format!(
                "/news/{}/{}",
                rng.random_range(2019..2024),
                rng.random_range(1..900)
            ),
            "text/html",
        ),
    }
}

fn text_body(rng: &mut ChaCha8Rng, len: usize, json: bool) -> Vec<u8> {
    let mut s = String::with_capacity(len + 16);
    s.push_str(if json {
        "{\"items\":["
    } else {
        "<!doctype html><html><body><p>"
    });
    while s.len() < len {
        if json {
            s.push_str(&format!(
                "{{\"id\":{},\"name\":\"{}\"}},",
                rng.random_range(1..99999),
                WORDS.choose(rng).expect("non-empty")
            ));
        } else {
            s.push_str(WORDS.choose(rng).expect("non-empty"));
            s.push(' ');
        }
    }
    let mut b = s.into_bytes();
    b.truncate(len);
    b
}

fn http_exchange(
    rng: &mut ChaCha8Rng,
    host: &str,
    ua: &str,
    profile: &PayloadProfile,
) -> (Vec<u8>, Vec<u8>) {
    let (path, ctype) = random_path(rng);
    let req = format!(
        "GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: {ua}\r\nAccept: */*\r\nAccept-Encoding: gzip, deflate\r\nConnection: keep-alive\r\n\r\n"
    );
    let len = log_uniform(rng, profile.min_body, profile.max_body);
    let body = match ctype {
        "image/png" => {
            let mut b = vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
            b.extend((8..len.max(8)).map(|_| rng.random::<u8>()));
            b
        }
        "application/json" => text_body(rng, len, true),
        _ => text_body(rng, len, false),
    };
    let mut resp = format!(
        "HTTP/1.1 200 OK\r\nServer: nginx\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: keep-alive\r\n\r\n",
        body.len()
    )
    .into_bytes();
    resp.extend_from_slice(&body);
    (req.into_bytes(), resp)
}

/// A TLS-style record: content type, version, length, opaque body.
fn tls_record(
    rng: &mut ChaCha8Rng,
    content_type: u8,
    version: [u8; 2],
    body_len: usize,
    lead: &[u8],
) -> Vec<u8> {
    let mut r = vec![content_type, version[0], version[1]];
    r.extend_from_slice(&(body_len as u16).to_be_bytes());
    r.extend_from_slice(lead);
    r.extend((lead.len()..body_len).map(|_| rng.random::<u8>()));
    r
}

fn tls_hello(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let ch_len = rng.random_range(220..=520);
    let hs_len = ch_len - 4;
    let lead = [1, 0, (hs_len >> 8) as u8, hs_len as u8, 3, 3];
    let client = tls_record(rng, 0x16, [3, 1], ch_len, &lead);
    let sh_len = rng.random_range(90..=122);
    let mut server = tls_record(
        rng,
        0x16,
        [3, 3],
        sh_len,
        &[2, 0, 0, (sh_len - 4) as u8, 3, 3],
    );
    server.extend(tls_record(rng, 0x14, [3, 3], 1, &[1]));
    let cert = rng.random_range(1800..=4200);
    server.extend(tls_record(rng, 0x17, [3, 3], cert, &[]));
    (client, server)
}

fn tls_exchange(rng: &mut ChaCha8Rng, profile: &PayloadProfile) -> (Vec<u8>, Vec<u8>) {
    let req_len = rng.random_range(120..=900);
    let req = tls_record(rng, 0x17, [3, 3], req_len, &[]);
    let resp_len = log_uniform(rng, profile.min_body, profile.max_body);
    let mut resp = Vec::new();
    let mut left = resp_len;
    while left > 0 {
        let n = left.min(16_384);
        resp.extend(tls_record(rng, 0x17, [3, 3], n, &[]));
        left -= n;
    }
    (req, resp)
}

const QTYPE_A: u16 = 1;
const QTYPE_AAAA: u16 = 28;

fn encode_qname(name: &str, out: &mut Vec<u8>) {
    for label in name.split('.') {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
}

fn dns_query(id: u16, name: &str, qtype: u16, edns: bool) -> Vec<u8> {
    let mut q = Vec::with_capacity(64);
    q.extend_from_slice(&id.to_be_bytes());
    q.extend_from_slice(&[0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, u8::from(edns)]);
    encode_qname(name, &mut q);
    q.extend_from_slice(&qtype.to_be_bytes());
    q.extend_from_slice(&1u16.to_be_bytes());
    if edns {
        q.extend_from_slice(&[0, 0, 41, 0x04, 0xd0, 0, 0, 0, 0, 0, 0]);
    }
    q
}

fn dns_answer(rng: &mut ChaCha8Rng, query: &[u8], qtype: u16) -> Vec<u8> {
    let mut r = query.to_vec();
    r[2] = 0x81;
    r[3] = 0x80;
    r[7] = 1;
    r[11] = 0;
    // drop any OPT record; the question ends 4 bytes after the qname
    let mut end = 12;
    while r[end] != 0 {
        end += usize::from(r[end]) + 1;
    }
    r.truncate(end + 5);
    r.extend_from_slice(&[0xc0, 0x0c]);
    r.extend_from_slice(&qtype.to_be_bytes());
    r.extend_from_slice(&[0, 1]);
    r.extend_from_slice(&rng.random_range(60u32..3600).to_be_bytes());
    let rdata: Vec<u8> = if qtype == QTYPE_AAAA {
        (0..16).map(|_| rng.random()).collect()
    } else {
        vec![10, 0, 0, rng.random_range(10..60)]
    };
    r.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
    r.extend_from_slice(&rdata);
    r
}

/// Per-client attributes drawn once from the master stream.
#[derive(Debug, Clone)]
struct Client {
    ip: Ipv4Addr,
    stack: Stack,
    hops: u8,
    rtt: u64,
    ua: &'static str,
    next_port: u16,
}

/// Everything a conversation needs, fixed before its substream runs.
#[derive(Debug, Clone)]
struct ConvPlan {
    start: u64,
    client: Client,
    server: Ipv4Addr,
    host: &'static str,
    tls: bool,
    dns: bool,
    dns_port: u16,
    port: u16,
}

fn next_ephemeral(c: &mut Client) -> u16 {
    let (lo, hi) = c.stack.ephemeral_range();
    let p = c.next_port;
    c.next_port = if p >= hi { lo } else { p + 1 };
    p
}

fn conversation(plan: &ConvPlan, cfg: &BenignConfig, rng: &mut ChaCha8Rng) -> Vec<(u64, Vec<u8>)> {
    let mut em = Emitter {
        rng,
        local: cfg.server_net,
        out: Vec::new(),
    };
    let cl = &plan.client;
    let rtt = (cl.rtt as f64 * em.rng.random_range(0.9..1.2)) as u64;
    let mut t = plan.start;

    if plan.dns {
        let mut c = Endpoint::new(em.rng, cl.ip, plan.dns_port, cl.stack, cl.hops);
        c.df = cl.stack == Stack::Linux;
        let mut r = Endpoint::new(em.rng, cfg.resolver, 53, Stack::Linux, 0);
        r.df = false;
        let mut qtypes = vec![QTYPE_A];
        if cl.stack == Stack::Linux && em.rng.random_bool(0.6) {
            qtypes.push(QTYPE_AAAA);
        }
        let edns = cl.stack == Stack::Linux;
        let mut last = t;
        for (i, &qt) in qtypes.iter().enumerate() {
            let qt_time = t + i as u64 * jitter(em.rng, 20, 150);
            let q = dns_query(em.rng.random(), plan.host, qt, edns);
            em.udp(qt_time, &mut c, &r, &q);
            let a = dns_answer(em.rng, &q, qt);
            last = qt_time + jitter(em.rng, 80, 600);
            em.udp(last, &mut r, &c, &a);
        }
        t = last + rtt / 2 + jitter(em.rng, 100, 2000);
    }

    let c = Endpoint::new(em.rng, cl.ip, plan.port, cl.stack, cl.hops);
    let s = Endpoint::new(
        em.rng,
        plan.server,
        if plan.tls { 443 } else { 80 },
        Stack::Linux,
        0,
    );
    let mut conn = Conn::new(c, s);
    let proc = jitter(em.rng, 30, 300);
    t = conn.handshake(&mut em, t, rtt, proc);

    let exchanges = em.rng.random_range(1..=cfg.payload.max_exchanges);
    let seg_gap = jitter(em.rng, 15, 120);
    if plan.tls {
        let (hello, reply) = tls_hello(em.rng);
        t += jitter(em.rng, 50, 400);
        t = conn.message(&mut em, t, true, &hello, rtt, seg_gap);
        let think = jitter(em.rng, 200, 3000);
        t = conn.message(&mut em, t + think, false, &reply, rtt, seg_gap);
        t += rtt;
    }
    for _ in 0..exchanges {
        let (req, resp) = if plan.tls {
            tls_exchange(em.rng, &cfg.payload)
        } else {
            http_exchange(em.rng, plan.host, cl.ua, &cfg.payload)
        };
        t += jitter(em.rng, 50, 20_000);
        t = conn.message(&mut em, t, true, &req, rtt, seg_gap);
        let think = jitter(em.rng, 300, 8000);
        t = conn.message(&mut em, t + think, false, &resp, rtt, seg_gap);
        t += rtt;
    }

    t += jitter(em.rng, 100, 50_000);
    if em.rng.random_bool(0.05) {
        conn.send(&mut em, t, true, TCP_RST | TCP_ACK, &[]);
    } else {
        conn.send(&mut em, t, true, TCP_FIN | TCP_ACK, &[]);
        let t2 = t + jitter(em.rng, 30, 300);
        conn.send(&mut em, t2, false, TCP_FIN | TCP_ACK, &[]);
        conn.send(&mut em, t2 + rtt, true, TCP_ACK, &[]);
    }
    em.out
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn finish(mut frames: Vec<(u64, Vec<u8>)>) -> Vec<RawRecord> {
    frames.sort_by_key(|(t, _)| *t);
    frames
        .into_iter()
        .map(|(t, f)| RawRecord::new(t, f))
        .collect()
}

/// Benign web traffic. Fully determined by `cfg` and `seed`.
pub fn gen_benign(cfg: &BenignConfig, seed: u64) -> Result<Vec<RawRecord>, SynthError> {
    render_benign(cfg, seed, 0..cfg.flow_count)
}

/// Later conversations (`holdout_flows` of them) from the same hosts as
/// [`gen_benign`] with the same seed, starting after its last conversation.
pub fn gen_benign_holdout(cfg: &BenignConfig, seed: u64) -> Result<Vec<RawRecord>, SynthError> {
    render_benign(
        cfg,
        seed,
        cfg.flow_count..cfg.flow_count + cfg.holdout_flows,
    )
}

fn render_benign(
    cfg: &BenignConfig,
    seed: u64,
    range: std::ops::Range<usize>,
) -> Result<Vec<RawRecord>, SynthError> {
    cfg.validate()?;
    let mut master = substream(seed, 0);
    let servers = cfg.server_ips();
    let mut clients: Vec<Client> = cfg
        .client_ips()
        .into_iter()
        .map(|ip| {
            let stack = if master.random_bool(0.55) {
                Stack::Linux
            } else {
                Stack::Windows
            };
            let (lo, hi) = stack.ephemeral_range();
            Client {
                ip,
                stack,
                hops: master.random_range(3..=18),
                rtt: log_uniform(&mut master, 4_000, 160_000) as u64,
                ua: match stack {
                    Stack::Linux => *[USER_AGENTS[0], USER_AGENTS[3], USER_AGENTS[4]]
                        .choose(&mut master)
                        .expect("non-empty"),
                    _ => *USER_AGENTS[1..3].choose(&mut master).expect("non-empty"),
                },
                next_port: master.random_range(lo..=hi),
            }
        })
        .collect();

    let gap = cfg.mean_gap_micros as f64;
    let mut t = cfg.start_micros;
    let total = cfg.flow_count + cfg.holdout_flows;
    let mut plans = Vec::with_capacity(total);
    for _ in 0..total {
        // exponential inter-arrival
        let u: f64 = master.random_range(f64::EPSILON..1.0);
        t += (-u.ln() * gap) as u64;
        let ci = master.random_range(0..clients.len());
        let si = master.random_range(0..servers.len());
        let tls = master.random_bool(cfg.payload.tls_fraction);
        let dns = master.random_bool(cfg.payload.dns_fraction);
        let client = &mut clients[ci];
        let dns_port = if dns { next_ephemeral(client) } else { 0 };
        let port = next_ephemeral(client);
        let per_server = HOST_NAMES.len().div_ceil(servers.len()).max(1);
        let name_idx = (si * per_server + master.random_range(0..per_server)) % HOST_NAMES.len();
        plans.push(ConvPlan {
            start: t,
            client: client.clone(),
            server: servers[si],
            host: HOST_NAMES[name_idx],
            tls,
            dns,
            dns_port,
            port,
        });
    }

    let frames: Vec<(u64, Vec<u8>)> = plans[range.clone()]
        .par_iter()
        .zip(range)
        .map(|(plan, i)| conversation(plan, cfg, &mut substream(seed, i as u64 + 1)))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(finish(frames))
}

/// Flood tools spread source ports over the whole unprivileged range: a
/// stride coprime to the range size visits every port once before repeating.
struct PortRotation {
    at: u32,
    stride: u32,
}

impl PortRotation {
    const LOW: u32 = 1024;
    const SPAN: u32 = 65536 - Self::LOW;

    fn new(rng: &mut ChaCha8Rng) -> Self {
        let stride = loop {
            let s = rng.random_range(1..Self::SPAN);
            if gcd(s, Self::SPAN) == 1 {
                break s;
            }
        };
        Self {
            at: rng.random_range(0..Self::SPAN),
            stride,
        }
    }

    fn next(&mut self) -> u16 {
        let port = Self::LOW + self.at;
        self.at = (self.at + self.stride) % Self::SPAN;
        port as u16
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn random_label(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    (0..len)
        .map(|_| char::from(*ALPHABET.choose(rng).expect("non-empty")))
        .collect()
}

/// Flood traffic from `cfg.src_ip`; exactly `cfg.packet_count` records.
pub fn gen_flood(cfg: &FloodConfig, seed: u64) -> Result<Vec<RawRecord>, SynthError> {
    cfg.validate()?;
    let mut rng = substream(seed, 0);
    let local = Ipv4Net {
        addr: cfg.dst_ip,
        prefix: 24,
    };
    let hops = rng.random_range(4..=20);
    let gap = 1e6 / cfg.rate;
    let mut frames = Vec::with_capacity(cfg.packet_count);
    let mut clock = cfg.start_micros as f64;
    let mut tick = |rng: &mut ChaCha8Rng| {
        clock += gap * rng.random_range(0.8..1.2);
        clock as u64
    };
    let mut em = Emitter {
        rng: &mut rng,
        local,
        out: Vec::new(),
    };
    let mut attacker = Endpoint::new(em.rng, cfg.src_ip, 0, Stack::Bot, hops);
    let victim =
        |rng: &mut ChaCha8Rng, port: u16| Endpoint::new(rng, cfg.dst_ip, port, Stack::Linux, 0);

    match cfg.kind {
        FloodKind::Syn => {
            let mut ports = PortRotation::new(em.rng);
            let dst = victim(em.rng, 80);
            for _ in 0..cfg.packet_count {
                let t = tick(em.rng);
                attacker.port = ports.next();
                let fields = TcpFields {
                    src_port: attacker.port,
                    dst_port: dst.port,
                    seq: em.rng.random(),
                    ack: 0,
                    flags: TCP_SYN,
                    window: 512,
                    options: &[],
                };
                let seg = tcp_segment(attacker.ip, dst.ip, &fields, &[]);
                let ip = attacker.next_ip(em.rng, dst.ip);
                let f = ipv4_frame(&ip, PROTO_TCP, &seg, local);
                em.push(t, f);
            }
        }
        FloodKind::Udp => {
            for _ in 0..cfg.packet_count {
                let t = tick(em.rng);
                attacker.port = em.rng.random_range(1024..=65535);
                let port = em.rng.random_range(1024..=65535);
                let dst = victim(em.rng, port);
                let len = em.rng.random_range(32..=1024);
                let payload: Vec<u8> = (0..len).map(|_| em.rng.random()).collect();
                em.udp(t, &mut attacker, &dst, &payload);
            }
        }
        FloodKind::Dns => {
            const QTYPES: [u16; 5] = [1, 28, 255, 16, 15];
            const ZONES: [&str; 4] = ["example.com", "example.net", "example.org", "test"];
            let dst = victim(em.rng, 53);
            for _ in 0..cfg.packet_count {
                let t = tick(em.rng);
                attacker.port = em.rng.random_range(1024..=65535);
                let len = em.rng.random_range(6..=16);
                let name = format!(
                    "{}.{}",
                    random_label(em.rng, len),
                    ZONES.choose(em.rng).expect("non-empty")
                );
                let qt = *QTYPES.choose(em.rng).expect("non-empty");
                let q = dns_query(em.rng.random(), &name, qt, em.rng.random_bool(0.5));
                em.udp(t, &mut attacker, &dst, &q);
            }
        }
        FloodKind::Http => {
            let mut ports = PortRotation::new(em.rng);
            let host = cfg.dst_ip.to_string();
            while em.out.len() < cfg.packet_count {
                attacker.port = ports.next();
                let mut c = attacker.clone();
                c.seq = em.rng.random();
                let mut conn = Conn::new(c, victim(em.rng, 80));
                let req = format!(
                    "GET /?{} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Go-http-client/1.1\r\nAccept-Encoding: gzip\r\n\r\n",
                    em.rng.random_range(0..u32::MAX)
                );
                let body_len = em.rng.random_range(300..=612);
                let body = text_body(em.rng, body_len, false);
                let mut resp = format!(
                    "HTTP/1.1 200 OK\r\nServer: nginx\r\nContent-Type: text/html\r\nContent-Length: {}\r\n\r\n",
                    body.len()
                )
                .into_bytes();
                resp.extend_from_slice(&body);
                // one record per tick, in conversation order
                let steps: [(bool, u8, &[u8]); 9] = [
                    (true, TCP_SYN, &[]),
                    (false, TCP_SYN | TCP_ACK, &[]),
                    (true, TCP_ACK, &[]),
                    (true, TCP_PSH | TCP_ACK, req.as_bytes()),
                    (false, TCP_PSH | TCP_ACK, &resp),
                    (true, TCP_ACK, &[]),
                    (true, TCP_FIN | TCP_ACK, &[]),
                    (false, TCP_FIN | TCP_ACK, &[]),
                    (true, TCP_ACK, &[]),
                ];
                for (from_client, flags, payload) in steps {
                    if em.out.len() == cfg.packet_count {
                        break;
                    }
                    let t = tick(em.rng);
                    conn.send(&mut em, t, from_client, flags, payload);
                }
                attacker.ip_id = conn.c.ip_id;
            }
        }
    }
    frames.append(&mut em.out);
    Ok(finish(frames))
}

/// One line of a labels sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub ip: Ipv4Addr,
    pub class: String,
}

pub fn benign_labels(cfg: &BenignConfig) -> Vec<LabelEntry> {
    cfg.client_ips()
        .into_iter()
        .map(|ip| LabelEntry {
            ip,
            class: "benign".into(),
        })
        .collect()
}

pub fn flood_labels(cfg: &FloodConfig) -> Vec<LabelEntry> {
    vec![LabelEntry {
        ip: cfg.src_ip,
        class: cfg.kind.class(),
    }]
}

/// Writes `ip,class` lines under a header row.
pub fn write_labels<W: Write>(entries: &[LabelEntry], mut w: W) -> Result<(), SynthError> {
    writeln!(w, "ip,class")?;
    for e in entries {
        writeln!(w, "{},{}", e.ip, e.class)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(r: R) -> Result<Vec<LabelEntry>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "ip,class") {
            continue;
        }
        let bad = |reason: &str| SynthError::Labels {
            line: i + 1,
            reason: reason.to_string(),
        };
        let (ip, class) = line
            .split_once(',')
            .ok_or_else(|| bad("expected ip,class"))?;
        let ip = ip.trim().parse().map_err(|_| bad("bad IPv4 address"))?;
        let class = class.trim();
        if class.is_empty() {
            return Err(bad("empty class"));
        }
        out.push(LabelEntry {
            ip,
            class: class.to_string(),
        });
    }
    Ok(out)
}
