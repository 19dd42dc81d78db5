//! Capture synthesis: a classic PCAP writer and frame builders.
//!
//! Used to rewrite parsed traces back to disk and to build deterministic
//! fixtures for tests and benchmarks.

use std::io::{self, Write};
use std::net::{IpAddr, SocketAddr};

use super::format::{LinkType, MAGIC_MICROS, MAGIC_NANOS};
use super::{Direction, FlowEndpoints, PacketRecord};
use crate::time::{Nanos, NANOS_PER_SEC};

/// Streams a classic libpcap file.
pub struct PcapWriter<W: Write> {
    out: W,
    big_endian: bool,
    nanosecond: bool,
    snaplen: u32,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(
        mut out: W,
        link: LinkType,
        nanosecond: bool,
        big_endian: bool,
    ) -> io::Result<PcapWriter<W>> {
        let magic = if nanosecond {
            MAGIC_NANOS
        } else {
            MAGIC_MICROS
        };
        let snaplen = 262_144u32;
        let mut header = Vec::with_capacity(24);
        let put32 = |h: &mut Vec<u8>, x: u32| {
            h.extend(if big_endian {
                x.to_be_bytes()
            } else {
                x.to_le_bytes()
            })
        };
        let put16 = |h: &mut Vec<u8>, x: u16| {
            h.extend(if big_endian {
                x.to_be_bytes()
            } else {
                x.to_le_bytes()
            })
        };
        put32(&mut header, magic);
        put16(&mut header, 2);
        put16(&mut header, 4);
        put32(&mut header, 0);
        put32(&mut header, 0);
        put32(&mut header, snaplen);
        put32(&mut header, link.code());
        out.write_all(&header)?;
        Ok(PcapWriter {
            out,
            big_endian,
            nanosecond,
            snaplen,
        })
    }

    /// Writes one record. `data` is truncated to the snap length; `orig_len`
    /// is recorded as given.
    pub fn write_record(&mut self, timestamp: Nanos, orig_len: u32, data: &[u8]) -> io::Result<()> {
        let data = &data[..data.len().min(self.snaplen as usize)];
        let secs = timestamp.0 / NANOS_PER_SEC;
        let frac = timestamp.0 % NANOS_PER_SEC;
        let frac = if self.nanosecond { frac } else { frac / 1_000 };
        let secs = u32::try_from(secs)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "timestamp past 2106"))?;
        let mut rec = Vec::with_capacity(16 + data.len());
        for x in [secs, frac as u32, data.len() as u32, orig_len] {
            rec.extend(if self.big_endian {
                x.to_be_bytes()
            } else {
                x.to_le_bytes()
            });
        }
        rec.extend_from_slice(data);
        self.out.write_all(&rec)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
        .sum();
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn ip_packet(src: IpAddr, dst: IpAddr, protocol: u8, l4: &[u8]) -> Vec<u8> {
    match (src, dst) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            let total = (20 + l4.len()) as u16;
            let mut p = vec![0x45, 0, 0, 0, 0, 0, 0x40, 0, 64, protocol, 0, 0];
            p[2..4].copy_from_slice(&total.to_be_bytes());
            p.extend(s.octets());
            p.extend(d.octets());
            let csum = ipv4_checksum(&p);
            p[10..12].copy_from_slice(&csum.to_be_bytes());
            p.extend_from_slice(l4);
            p
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            let mut p = vec![0x60, 0, 0, 0];
            p.extend((l4.len() as u16).to_be_bytes());
            p.extend([protocol, 64]);
            p.extend(s.octets());
            p.extend(d.octets());
            p.extend_from_slice(l4);
            p
        }
        _ => panic!("mixed address families: {src} -> {dst}"),
    }
}

fn link_frame(link: LinkType, ip: Vec<u8>) -> Vec<u8> {
    let v6 = ip[0] >> 4 == 6;
    let ethertype: u16 = if v6 { 0x86DD } else { 0x0800 };
    match link {
        LinkType::Ethernet => {
            let mut f = vec![0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01];
            f.extend(ethertype.to_be_bytes());
            f.extend(ip);
            f
        }
        LinkType::LinuxSll => {
            let mut f = vec![0, 0, 0, 1, 0, 6, 0x02, 0, 0, 0, 0, 0x01, 0, 0];
            f.extend(ethertype.to_be_bytes());
            f.extend(ip);
            f
        }
        LinkType::RawIp | LinkType::Ipv4 | LinkType::Ipv6 => ip,
    }
}

/// Bytes added around a UDP payload for the given link and address family.
pub fn frame_overhead(link: LinkType, ipv6: bool) -> usize {
    let link_len = match link {
        LinkType::Ethernet => 14,
        LinkType::LinuxSll => 16,
        _ => 0,
    };
    link_len + if ipv6 { 40 } else { 20 } + 8
}

pub fn udp_frame(link: LinkType, src: SocketAddr, dst: SocketAddr, payload: &[u8]) -> Vec<u8> {
    let mut seg = Vec::with_capacity(8 + payload.len());
    seg.extend(src.port().to_be_bytes());
    seg.extend(dst.port().to_be_bytes());
    seg.extend(((8 + payload.len()) as u16).to_be_bytes());
    seg.extend([0, 0]);
    seg.extend_from_slice(payload);
    link_frame(link, ip_packet(src.ip(), dst.ip(), 17, &seg))
}

/// A minimal TCP segment (ACK, no options) padded to `payload_len`.
pub fn tcp_ipv4_ethernet(src: SocketAddr, dst: SocketAddr, payload_len: usize) -> Vec<u8> {
    let mut seg = Vec::with_capacity(20 + payload_len);
    seg.extend(src.port().to_be_bytes());
    seg.extend(dst.port().to_be_bytes());
    seg.extend([0, 0, 0, 1, 0, 0, 0, 1, 0x50, 0x10, 0xFF, 0xFF, 0, 0, 0, 0]);
    seg.resize(20 + payload_len, 0);
    link_frame(LinkType::Ethernet, ip_packet(src.ip(), dst.ip(), 6, &seg))
}

/// A payload that passes the QUIC filter: a long header when `long` is set,
/// otherwise a 1-RTT short header.
pub fn quic_payload(len: usize, long: bool) -> Vec<u8> {
    let mut p = if long {
        vec![0xC3, 0x00, 0x00, 0x00, 0x01, 0x08, 0x00]
    } else {
        vec![0x41]
    };
    p.resize(len.max(p.len()), 0x5A);
    p
}

/// Output options for [`capture`].
#[derive(Debug, Clone, Copy)]
pub struct CaptureOptions {
    pub link: LinkType,
    /// Absolute capture time of trace time zero.
    pub epoch: Nanos,
    pub nanosecond: bool,
    pub big_endian: bool,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        CaptureOptions {
            link: LinkType::Ethernet,
            epoch: Nanos(1_700_000_000 * NANOS_PER_SEC),
            nanosecond: false,
            big_endian: false,
        }
    }
}

/// Frame for one packet record and the wire length to record for it. The
/// payload is sized so the frame matches `packet.length`; lengths shorter
/// than the frame overhead plus a minimal QUIC header are padded up.
pub fn packet_frame(
    packet: &PacketRecord,
    endpoints: FlowEndpoints,
    link: LinkType,
    long_header: bool,
) -> (Vec<u8>, u32) {
    let (src, dst) = match packet.direction {
        Direction::ClientToServer => (endpoints.client, endpoints.server),
        Direction::ServerToClient => (endpoints.server, endpoints.client),
    };
    let overhead = frame_overhead(link, endpoints.client.is_ipv6());
    let payload_len = (packet.length as usize).saturating_sub(overhead);
    let frame = udp_frame(link, src, dst, &quic_payload(payload_len, long_header));
    let orig = (packet.length as usize).max(frame.len()) as u32;
    (frame, orig)
}

/// Renders packet metadata as a PCAP whose wire lengths equal each record's
/// `length`. The first packet carries a long header.
pub fn capture(
    packets: &[PacketRecord],
    endpoints: FlowEndpoints,
    options: CaptureOptions,
) -> Vec<u8> {
    let mut w = PcapWriter::new(
        Vec::new(),
        options.link,
        options.nanosecond,
        options.big_endian,
    )
    .expect("writing to a Vec cannot fail");
    for (n, p) in packets.iter().enumerate() {
        let (frame, orig) = packet_frame(p, endpoints, options.link, n == 0);
        w.write_record(options.epoch + p.timestamp, orig, &frame)
            .expect("writing to a Vec cannot fail");
    }
    w.into_inner()
}

/// Smallest wire length [`capture`] reproduces exactly for this link and
/// address family.
pub fn min_exact_length(link: LinkType, ipv6: bool) -> u32 {
    (frame_overhead(link, ipv6) + 7) as u32
}
