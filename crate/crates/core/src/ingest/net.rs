//! Link, network and transport demultiplexing down to UDP payloads.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use super::format::LinkType;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

const IPPROTO_UDP: u8 = 17;

/// A UDP datagram lifted out of a captured frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Datagram<'a> {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub payload: &'a [u8],
}

/// What a frame turned out to carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Demux<'a> {
    Udp(Datagram<'a>),
    /// IP but not UDP, a non-initial fragment, or a non-IP frame.
    Other,
}

fn be16(b: &[u8], i: usize) -> u16 {
    u16::from_be_bytes([b[i], b[i + 1]])
}

pub fn demux(link: LinkType, frame: &[u8]) -> Demux<'_> {
    let inner = match link {
        LinkType::Ethernet => ethernet(frame),
        LinkType::LinuxSll => sll(frame),
        LinkType::RawIp => raw_ip(frame),
        LinkType::Ipv4 => ipv4(frame),
        LinkType::Ipv6 => ipv6(frame),
    };
    inner.map_or(Demux::Other, Demux::Udp)
}

fn by_ethertype(ethertype: u16, payload: &[u8]) -> Option<Datagram<'_>> {
    match ethertype {
        ETHERTYPE_IPV4 => ipv4(payload),
        ETHERTYPE_IPV6 => ipv6(payload),
        _ => None,
    }
}

fn ethernet(frame: &[u8]) -> Option<Datagram<'_>> {
    if frame.len() < 14 {
        return None;
    }
    let mut ethertype = be16(frame, 12);
    let mut offset = 14;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        if frame.len() < offset + 4 {
            return None;
        }
        ethertype = be16(frame, offset + 2);
        offset += 4;
    }
    by_ethertype(ethertype, &frame[offset..])
}

fn sll(frame: &[u8]) -> Option<Datagram<'_>> {
    if frame.len() < 16 {
        return None;
    }
    by_ethertype(be16(frame, 14), &frame[16..])
}

fn raw_ip(packet: &[u8]) -> Option<Datagram<'_>> {
    match packet.first()? >> 4 {
        4 => ipv4(packet),
        6 => ipv6(packet),
        _ => None,
    }
}

fn ipv4(packet: &[u8]) -> Option<Datagram<'_>> {
    if packet.len() < 20 || packet[0] >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(packet[0] & 0x0F) * 4;
    let total = usize::from(be16(packet, 2));
    if ihl < 20 || packet.len() < ihl || total < ihl {
        return None;
    }
    if be16(packet, 6) & 0x1FFF != 0 {
        return None;
    }
    if packet[9] != IPPROTO_UDP {
        return None;
    }
    let src = IpAddr::V4(Ipv4Addr::new(
        packet[12], packet[13], packet[14], packet[15],
    ));
    let dst = IpAddr::V4(Ipv4Addr::new(
        packet[16], packet[17], packet[18], packet[19],
    ));
    let end = total.min(packet.len());
    udp(src, dst, &packet[ihl..end])
}

fn ipv6(packet: &[u8]) -> Option<Datagram<'_>> {
    if packet.len() < 40 || packet[0] >> 4 != 6 {
        return None;
    }
    let payload_len = usize::from(be16(packet, 4));
    let src: [u8; 16] = packet[8..24].try_into().ok()?;
    let dst: [u8; 16] = packet[24..40].try_into().ok()?;
    let end = (40 + payload_len).min(packet.len());
    let mut next = packet[6];
    let mut offset = 40;
    loop {
        match next {
            IPPROTO_UDP => break,
            // hop-by-hop, routing, destination options
            0 | 43 | 60 => {
                if end < offset + 8 {
                    return None;
                }
                next = packet[offset];
                offset += (usize::from(packet[offset + 1]) + 1) * 8;
            }
            // fragment
            44 => {
                if end < offset + 8 || be16(packet, offset + 2) & 0xFFF8 != 0 {
                    return None;
                }
                next = packet[offset];
                offset += 8;
            }
            // authentication header
            51 => {
                if end < offset + 8 {
                    return None;
                }
                next = packet[offset];
                offset += (usize::from(packet[offset + 1]) + 2) * 4;
            }
            _ => return None,
        }
        if offset > end {
            return None;
        }
    }
    udp(
        IpAddr::V6(Ipv6Addr::from(src)),
        IpAddr::V6(Ipv6Addr::from(dst)),
        &packet[offset..end],
    )
}

fn udp(src: IpAddr, dst: IpAddr, segment: &[u8]) -> Option<Datagram<'_>> {
    if segment.len() < 8 {
        return None;
    }
    let length = usize::from(be16(segment, 4));
    if length < 8 {
        return None;
    }
    let end = length.min(segment.len());
    Some(Datagram {
        src: SocketAddr::new(src, be16(segment, 0)),
        dst: SocketAddr::new(dst, be16(segment, 2)),
        payload: &segment[8..end],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::synth;

    #[test]
    fn ethernet_ipv4_udp() {
        let src: SocketAddr = "10.0.0.1:50000".parse().unwrap();
        let dst: SocketAddr = "93.184.216.34:443".parse().unwrap();
        let frame = synth::udp_frame(LinkType::Ethernet, src, dst, &[0xC3, 1, 2, 3]);
        assert_eq!(
            demux(LinkType::Ethernet, &frame),
            Demux::Udp(Datagram {
                src,
                dst,
                payload: &[0xC3, 1, 2, 3]
            })
        );
    }

    #[test]
    fn raw_ipv6_udp() {
        let src: SocketAddr = "[2001:db8::1]:50000".parse().unwrap();
        let dst: SocketAddr = "[2001:db8::2]:443".parse().unwrap();
        let frame = synth::udp_frame(LinkType::RawIp, src, dst, &[0x41; 30]);
        match demux(LinkType::RawIp, &frame) {
            Demux::Udp(d) => {
                assert_eq!((d.src, d.dst), (src, dst));
                assert_eq!(d.payload.len(), 30);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tcp_is_other() {
        let src: SocketAddr = "10.0.0.1:50000".parse().unwrap();
        let dst: SocketAddr = "10.0.0.2:443".parse().unwrap();
        let frame = synth::tcp_ipv4_ethernet(src, dst, 40);
        assert_eq!(demux(LinkType::Ethernet, &frame), Demux::Other);
    }

    #[test]
    fn vlan_tag_is_skipped() {
        let src: SocketAddr = "10.0.0.1:50000".parse().unwrap();
        let dst: SocketAddr = "10.0.0.2:443".parse().unwrap();
        let plain = synth::udp_frame(LinkType::Ethernet, src, dst, &[0x40; 10]);
        let mut tagged = plain[..12].to_vec();
        tagged.extend([0x81, 0x00, 0x00, 0x05]);
        tagged.extend(&plain[12..]);
        assert!(matches!(demux(LinkType::Ethernet, &tagged), Demux::Udp(_)));
    }

    #[test]
    fn non_initial_fragment_is_other() {
        let src: SocketAddr = "10.0.0.1:50000".parse().unwrap();
        let dst: SocketAddr = "10.0.0.2:443".parse().unwrap();
        let mut frame = synth::udp_frame(LinkType::Ipv4, src, dst, &[0x40; 10]);
        frame[7] = 0x10;
        assert_eq!(demux(LinkType::Ipv4, &frame), Demux::Other);
    }

    #[test]
    fn short_frames_are_other() {
        for len in 0..20 {
            assert_eq!(demux(LinkType::Ethernet, &vec![0u8; len]), Demux::Other);
            assert_eq!(demux(LinkType::RawIp, &vec![0x45u8; len]), Demux::Other);
        }
    }
}
