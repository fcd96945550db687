//! Frame parsing and classic pcap I/O.
//!
//! Only Ethernet-framed IPv4 is decoded. Anything else maps to
//! [`Parsed::Skip`] so that one odd frame never aborts a capture stream.

use std::io::{self, Read, Write};
use std::net::Ipv4Addr;

use thiserror::Error;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const ETHERTYPE_IPV4: u16 = 0x0800;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const TCP_FIN: u8 = 0x01;
pub const TCP_SYN: u8 = 0x02;
pub const TCP_RST: u8 = 0x04;
pub const TCP_PSH: u8 = 0x08;
pub const TCP_ACK: u8 = 0x10;

pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
pub const PCAP_MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
pub const PCAP_SNAPLEN: u32 = 65_535;
pub const LINKTYPE_ETHERNET: u32 = 1;
const PCAP_GLOBAL_HEADER_LEN: usize = 24;
const PCAP_RECORD_HEADER_LEN: usize = 16;

/// One captured frame as stored in a capture file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub ts_micros: u64,
    pub bytes: Vec<u8>,
}

impl RawRecord {
    pub fn new(ts_micros: u64, bytes: Vec<u8>) -> Self {
        Self { ts_micros, bytes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
}

impl LinkType {
    pub fn from_pcap(linktype: u32) -> Option<Self> {
        match linktype {
            LINKTYPE_ETHERNET => Some(LinkType::Ethernet),
            _ => None,
        }
    }
}

/// A frame decomposed into its IPv4 and transport views.
///
/// For ICMP, `src_port` carries the ICMP type and `dst_port` the code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPacket {
    pub ts_micros: u64,
    pub link_type: LinkType,
    pub ip_offset: usize,
    pub ip_version: u8,
    pub protocol: u8,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    /// TCP flag byte; zero for other protocols.
    pub tcp_flags: u8,
    /// Bytes from `ip_offset` to the end of the frame.
    pub ip_total_bytes: Vec<u8>,
}

impl ParsedPacket {
    /// ICMP, TCP and UDP packets participate in flow tracking.
    pub fn is_tracked(&self) -> bool {
        matches!(self.protocol, PROTO_ICMP | PROTO_TCP | PROTO_UDP)
    }

    pub fn has_tcp_flag(&self, flag: u8) -> bool {
        self.protocol == PROTO_TCP && self.tcp_flags & flag != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Packet(ParsedPacket),
    Skip(SkipReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    Empty,
    ShortFrame,
    NotIpv4,
    LaterFragment,
    ShortHeader,
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// Decode an Ethernet frame. Never reads past the end of `rec.bytes`.
pub fn parse_packet(rec: &RawRecord, link_type: LinkType) -> Parsed {
    let frame = rec.bytes.as_slice();
    if frame.is_empty() {
        return Parsed::Skip(SkipReason::Empty);
    }
    let ip_offset = match link_type {
        LinkType::Ethernet => ETHERNET_HEADER_LEN,
    };
    if frame.len() < ip_offset {
        return Parsed::Skip(SkipReason::ShortFrame);
    }
    if be16(frame, 12) != ETHERTYPE_IPV4 {
        return Parsed::Skip(SkipReason::NotIpv4);
    }
    let ip = &frame[ip_offset..];
    if ip.len() < IPV4_MIN_HEADER_LEN {
        return Parsed::Skip(SkipReason::ShortHeader);
    }
    if ip[0] >> 4 != 4 {
        return Parsed::Skip(SkipReason::NotIpv4);
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < IPV4_MIN_HEADER_LEN || ihl > ip.len() {
        return Parsed::Skip(SkipReason::ShortHeader);
    }
    if be16(ip, 6) & 0x1fff != 0 {
        return Parsed::Skip(SkipReason::LaterFragment);
    }
    let protocol = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let l4 = &ip[ihl..];

    let (src_port, dst_port, tcp_flags) = match protocol {
        PROTO_TCP => {
            if l4.len() < 20 {
                return Parsed::Skip(SkipReason::ShortHeader);
            }
            let data_offset = usize::from(l4[12] >> 4) * 4;
            if data_offset < 20 || data_offset > l4.len() {
                return Parsed::Skip(SkipReason::ShortHeader);
            }
            (be16(l4, 0), be16(l4, 2), l4[13])
        }
        PROTO_UDP => {
            if l4.len() < 8 {
                return Parsed::Skip(SkipReason::ShortHeader);
            }
            (be16(l4, 0), be16(l4, 2), 0)
        }
        PROTO_ICMP => {
            if l4.len() < 8 {
                return Parsed::Skip(SkipReason::ShortHeader);
            }
            (u16::from(l4[0]), u16::from(l4[1]), 0)
        }
        _ => (0, 0, 0),
    };

    Parsed::Packet(ParsedPacket {
        ts_micros: rec.ts_micros,
        link_type,
        ip_offset,
        ip_version: 4,
        protocol,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        tcp_flags,
        ip_total_bytes: ip.to_vec(),
    })
}

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("unrecognized pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("capture file truncated after {records} records")]
    TruncatedFile { records: usize },
    #[error("record of {len} bytes exceeds snaplen {snaplen}")]
    RecordTooLarge { len: usize, snaplen: u32 },
    #[error("pcap i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Streaming reader for classic pcap files.
pub struct PcapReader<R> {
    inner: R,
    swapped: bool,
    snaplen: u32,
    linktype: u32,
    records: usize,
    done: bool,
}

/// Reads `buf.len()` bytes; returns how many were read before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; PCAP_GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut header)?;
        if got < 4 {
            return Err(PcapError::TruncatedFile { records: 0 });
        }
        let magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let swapped = match magic {
            PCAP_MAGIC => false,
            PCAP_MAGIC_SWAPPED => true,
            other => return Err(PcapError::BadMagic(other)),
        };
        if got < PCAP_GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedFile { records: 0 });
        }
        let word = |at: usize| {
            let b = [header[at], header[at + 1], header[at + 2], header[at + 3]];
            if swapped {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        Ok(Self {
            snaplen: word(16),
            linktype: word(20),
            inner,
            swapped,
            records: 0,
            done: false,
        })
    }

    pub fn linktype(&self) -> u32 {
        self.linktype
    }

    pub fn snaplen(&self) -> u32 {
        self.snaplen
    }

    pub fn is_swapped(&self) -> bool {
        self.swapped
    }

    fn word(&self, b: &[u8]) -> u32 {
        let b = [b[0], b[1], b[2], b[3]];
        if self.swapped {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn next_record(&mut self) -> Result<Option<RawRecord>, PcapError> {
        let mut hdr = [0u8; PCAP_RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut hdr)?;
        if got == 0 {
            return Ok(None);
        }
        if got < PCAP_RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedFile {
                records: self.records,
            });
        }
        let ts_sec = u64::from(self.word(&hdr[0..4]));
        let ts_usec = u64::from(self.word(&hdr[4..8]));
        let incl_len = self.word(&hdr[8..12]) as usize;
        let mut bytes = vec![0u8; incl_len];
        if read_full(&mut self.inner, &mut bytes)? < incl_len {
            return Err(PcapError::TruncatedFile {
                records: self.records,
            });
        }
        self.records += 1;
        Ok(Some(RawRecord {
            ts_micros: ts_sec * 1_000_000 + ts_usec,
            bytes,
        }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<RawRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(rec)) => Some(Ok(rec)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Read every record; stops at the first error.
pub fn read_pcap<R: Read>(stream: R) -> Result<Vec<RawRecord>, PcapError> {
    PcapReader::new(stream)?.collect()
}

/// Write classic little-endian pcap (v2.4, Ethernet). Returns bytes written.
pub fn write_pcap<'a, I, W>(records: I, mut stream: W) -> Result<u64, PcapError>
where
    I: IntoIterator<Item = &'a RawRecord>,
    W: Write,
{
    let mut header = Vec::with_capacity(PCAP_GLOBAL_HEADER_LEN);
    header.extend_from_slice(&PCAP_MAGIC.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&4u16.to_le_bytes());
    header.extend_from_slice(&0i32.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&PCAP_SNAPLEN.to_le_bytes());
    header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    stream.write_all(&header)?;
    let mut written = header.len() as u64;

    for rec in records {
        if rec.bytes.len() > PCAP_SNAPLEN as usize {
            return Err(PcapError::RecordTooLarge {
                len: rec.bytes.len(),
                snaplen: PCAP_SNAPLEN,
            });
        }
        let len = rec.bytes.len() as u32;
        let mut hdr = [0u8; PCAP_RECORD_HEADER_LEN];
        hdr[0..4].copy_from_slice(&((rec.ts_micros / 1_000_000) as u32).to_le_bytes());
        hdr[4..8].copy_from_slice(&((rec.ts_micros % 1_000_000) as u32).to_le_bytes());
        hdr[8..12].copy_from_slice(&len.to_le_bytes());
        hdr[12..16].copy_from_slice(&len.to_le_bytes());
        stream.write_all(&hdr)?;
        stream.write_all(&rec.bytes)?;
        written += (PCAP_RECORD_HEADER_LEN + rec.bytes.len()) as u64;
    }
    stream.flush()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eth_ipv4(protocol: u8, l4: &[u8]) -> Vec<u8> {
        let mut f = vec![0u8; 14];
        f[12] = 0x08;
        let total = 20 + l4.len();
        let mut ip = vec![
            0x45,
            0,
            (total >> 8) as u8,
            total as u8,
            0,
            1,
            0x40,
            0,
            64,
            protocol,
            0,
            0,
        ];
        ip.extend_from_slice(&[192, 168, 1, 1]);
        ip.extend_from_slice(&[10, 0, 0, 1]);
        f.extend_from_slice(&ip);
        f.extend_from_slice(l4);
        f
    }

    fn tcp_frame() -> Vec<u8> {
        let mut tcp = vec![0u8; 20];
        tcp[0..2].copy_from_slice(&4242u16.to_be_bytes());
        tcp[2..4].copy_from_slice(&80u16.to_be_bytes());
        tcp[12] = 5 << 4;
        tcp[13] = TCP_SYN;
        let mut f = eth_ipv4(PROTO_TCP, &tcp);
        f.resize(60, 0);
        f
    }

    #[test]
    fn parses_tcp_frame() {
        let rec = RawRecord::new(7, tcp_frame());
        let Parsed::Packet(p) = parse_packet(&rec, LinkType::Ethernet) else {
            panic!("expected packet");
        };
        assert_eq!(p.protocol, 6);
        assert_eq!(p.src_port, 4242);
        assert_eq!(p.dst_port, 80);
        assert_eq!(p.ip_offset, 14);
        assert_eq!(p.src_ip, Ipv4Addr::new(192, 168, 1, 1));
        assert_eq!(p.dst_ip, Ipv4Addr::new(10, 0, 0, 1));
        assert_eq!(p.ip_total_bytes.len(), 46);
        assert!(p.has_tcp_flag(TCP_SYN));
    }

    #[test]
    fn ipv6_is_skipped() {
        let mut f = tcp_frame();
        f[12] = 0x86;
        f[13] = 0xdd;
        assert_eq!(
            parse_packet(&RawRecord::new(0, f), LinkType::Ethernet),
            Parsed::Skip(SkipReason::NotIpv4)
        );
    }

    #[test]
    fn icmp_type_and_code_become_ports() {
        let icmp = [8u8, 0, 0, 0, 0, 1, 0, 1];
        let f = eth_ipv4(PROTO_ICMP, &icmp);
        let Parsed::Packet(p) = parse_packet(&RawRecord::new(0, f), LinkType::Ethernet) else {
            panic!("expected packet");
        };
        assert_eq!((p.protocol, p.src_port, p.dst_port), (1, 8, 0));
    }

    #[test]
    fn later_fragments_are_skipped() {
        let mut f = tcp_frame();
        f[14 + 6] = 0x00;
        f[14 + 7] = 0x10;
        assert_eq!(
            parse_packet(&RawRecord::new(0, f), LinkType::Ethernet),
            Parsed::Skip(SkipReason::LaterFragment)
        );
    }

    #[test]
    fn other_protocols_parse_untracked() {
        let f = eth_ipv4(47, &[0u8; 8]);
        let Parsed::Packet(p) = parse_packet(&RawRecord::new(0, f), LinkType::Ethernet) else {
            panic!("expected packet");
        };
        assert!(!p.is_tracked());
    }

    #[test]
    fn empty_pcap_is_header_only() {
        let mut out = Vec::new();
        assert_eq!(write_pcap(&[], &mut out).unwrap(), 24);
        assert_eq!(out.len(), 24);
    }

    #[test]
    fn single_record_file() {
        let recs = vec![RawRecord::new(1_500_000, tcp_frame())];
        let mut out = Vec::new();
        assert_eq!(write_pcap(&recs, &mut out).unwrap(), 100);
        let back = read_pcap(out.as_slice()).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].bytes.len(), 60);
    }

    #[test]
    fn pcapng_magic_rejected() {
        let mut data = 0x0a0d0d0au32.to_le_bytes().to_vec();
        data.extend_from_slice(&[0u8; 20]);
        assert!(matches!(
            PcapReader::new(data.as_slice()),
            Err(PcapError::BadMagic(0x0a0d0d0a))
        ));
    }

    #[test]
    fn truncated_body_yields_prefix_then_error() {
        let recs = vec![
            RawRecord::new(1, vec![1; 30]),
            RawRecord::new(2, vec![2; 30]),
        ];
        let mut out = Vec::new();
        write_pcap(&recs, &mut out).unwrap();
        out.truncate(out.len() - 5);
        let items: Vec<_> = PcapReader::new(out.as_slice()).unwrap().collect();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].as_ref().unwrap(), &recs[0]);
        assert!(matches!(
            items[1],
            Err(PcapError::TruncatedFile { records: 1 })
        ));
    }

    /// Re-encode a little-endian file with big-endian headers.
    fn to_big_endian(le: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(le.len());
        let flip32 = |b: &[u8]| [b[3], b[2], b[1], b[0]];
        out.extend_from_slice(&flip32(&le[0..4]));
        out.extend_from_slice(&[le[5], le[4], le[7], le[6]]);
        for at in (8..24).step_by(4) {
            out.extend_from_slice(&flip32(&le[at..at + 4]));
        }
        let mut pos = 24;
        while pos < le.len() {
            for at in (pos..pos + 16).step_by(4) {
                out.extend_from_slice(&flip32(&le[at..at + 4]));
            }
            let len =
                u32::from_le_bytes([le[pos + 8], le[pos + 9], le[pos + 10], le[pos + 11]]) as usize;
            out.extend_from_slice(&le[pos + 16..pos + 16 + len]);
            pos += 16 + len;
        }
        out
    }

    #[test]
    fn snaplen_truncation_yields_stored_bytes() {
        let mut out = Vec::new();
        write_pcap(&[RawRecord::new(3, vec![9; 40])], &mut out).unwrap();
        // orig_len larger than incl_len, as a snaplen-truncated capture would store.
        out[24 + 12..24 + 16].copy_from_slice(&1500u32.to_le_bytes());
        let back = read_pcap(out.as_slice()).unwrap();
        assert_eq!(back[0].bytes.len(), 40);
    }

    fn arb_records() -> impl Strategy<Value = Vec<RawRecord>> {
        prop::collection::vec(
            (
                0u64..4_000_000_000_000_000,
                prop::collection::vec(any::<u8>(), 0..200),
            )
                .prop_map(|(ts, bytes)| RawRecord::new(ts, bytes)),
            0..20,
        )
    }

    proptest! {
        #[test]
        fn pcap_round_trip(recs in arb_records()) {
            let mut le = Vec::new();
            write_pcap(&recs, &mut le).unwrap();
            prop_assert_eq!(&read_pcap(le.as_slice()).unwrap(), &recs);
            let be = to_big_endian(&le);
            let reader = PcapReader::new(be.as_slice()).unwrap();
            prop_assert!(reader.is_swapped());
            prop_assert_eq!(&reader.collect::<Result<Vec<_>, _>>().unwrap(), &recs);
        }

        #[test]
        fn truncated_frames_never_panic(cut in 0usize..60, flip in any::<u8>(), at in 0usize..60) {
            let mut f = tcp_frame();
            f[at] ^= flip;
            f.truncate(cut);
            match parse_packet(&RawRecord::new(0, f.clone()), LinkType::Ethernet) {
                Parsed::Skip(_) => {}
                Parsed::Packet(p) => {
                    prop_assert!(p.ip_offset + p.ip_total_bytes.len() <= f.len());
                    prop_assert!(p.ip_total_bytes.len() >= IPV4_MIN_HEADER_LEN);
                }
            }
        }
    }
}
