//! PCAP ingestion: QUIC-over-UDP packet metadata with resolved direction.
//!
//! A capture is reduced to one trace: the dominant (client, server) UDP
//! endpoint pair among packets that pass [`classify_quic`]. The client is the
//! source of the first retained packet of that pair unless the endpoints are
//! overridden in [`QuicFilterConfig`]. Timestamps are rebased so the earliest
//! retained packet sits at zero, and lengths are the on-wire (original)
//! lengths from the record headers.

pub mod format;
pub mod net;
pub mod quic;
pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Nanos;
use format::Records;
use net::Demux;

pub use format::LinkType;
pub use quic::classify_quic;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed pcap header: {0}")]
    MalformedHeader(String),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("truncated packet record at byte {offset}: needs {needed} bytes, {available} remain")]
    TruncatedPacket {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("ambiguous endpoints: {} flows tie for the most packets ({})", .pairs.len(), fmt_pairs(.pairs))]
    AmbiguousEndpoints {
        pairs: Vec<(SocketAddr, SocketAddr)>,
    },
}

fn fmt_pairs(pairs: &[(SocketAddr, SocketAddr)]) -> String {
    pairs
        .iter()
        .map(|(a, b)| format!("{a} <-> {b}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

/// One retained packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Time since the first retained packet of the trace.
    pub timestamp: Nanos,
    /// Original on-wire length in bytes.
    pub length: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowEndpoints {
    pub client: SocketAddr,
    pub server: SocketAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointMismatch {
    pub src: SocketAddr,
    pub dst: SocketAddr,
}

pub fn resolve_direction(
    src: SocketAddr,
    dst: SocketAddr,
    endpoints: &FlowEndpoints,
) -> Result<Direction, EndpointMismatch> {
    if src == endpoints.client && dst == endpoints.server {
        Ok(Direction::ClientToServer)
    } else if src == endpoints.server && dst == endpoints.client {
        Ok(Direction::ServerToClient)
    } else {
        Err(EndpointMismatch { src, dst })
    }
}

/// QUIC packets of one client/server conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMeta {
    pub trace_id: String,
    pub server_label: String,
    /// `None` only for a trace without packets.
    pub endpoints: Option<FlowEndpoints>,
    pub packets: Vec<PacketRecord>,
}

impl TraceMeta {
    pub fn empty(trace_id: impl Into<String>, server_label: impl Into<String>) -> TraceMeta {
        TraceMeta {
            trace_id: trace_id.into(),
            server_label: server_label.into(),
            endpoints: None,
            packets: Vec::new(),
        }
    }

    /// Timestamp of the last packet; zero for an empty trace.
    pub fn duration(&self) -> Nanos {
        self.packets.last().map_or(Nanos::ZERO, |p| p.timestamp)
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.packets
            .iter()
            .filter(|p| p.direction == direction)
            .count()
    }
}

fn default_quic_ports() -> BTreeSet<u16> {
    BTreeSet::from([443])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuicFilterConfig {
    /// A datagram is a QUIC candidate when either port is listed.
    pub quic_ports: BTreeSet<u16>,
    /// Pins the conversation and its orientation instead of inferring both.
    pub endpoints: Option<FlowEndpoints>,
}

impl Default for QuicFilterConfig {
    fn default() -> Self {
        QuicFilterConfig {
            quic_ports: default_quic_ports(),
            endpoints: None,
        }
    }
}

/// Per-capture counters. Every record lands in exactly one bucket.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records: usize,
    pub retained: usize,
    /// Not UDP over IPv4/IPv6.
    pub non_udp: usize,
    /// UDP but failing the QUIC predicate.
    pub non_quic: usize,
    /// QUIC packets of other conversations than the selected one.
    pub other_flows: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub trace: TraceMeta,
    pub stats: IngestStats,
}

impl Ingested {
    /// Set when nothing passed the filter; the trace is then empty.
    pub fn no_quic_traffic(&self) -> bool {
        self.trace.packets.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    timestamp: Nanos,
    length: u32,
    src: SocketAddr,
    dst: SocketAddr,
}

fn flow_key(a: SocketAddr, b: SocketAddr) -> (SocketAddr, SocketAddr) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn collect_candidates(
    data: &[u8],
    config: &QuicFilterConfig,
    stats: &mut IngestStats,
) -> Result<Vec<Candidate>, IngestError> {
    let (header, records) = Records::new(data)?;
    let mut out = Vec::new();
    for record in records {
        let record = record?;
        stats.records += 1;
        match net::demux(header.link_type, record.data) {
            Demux::Udp(d) => {
                if classify_quic(d.payload, (d.src.port(), d.dst.port()), config) {
                    out.push(Candidate {
                        timestamp: record.timestamp,
                        length: record.orig_len,
                        src: d.src,
                        dst: d.dst,
                    });
                } else {
                    stats.non_quic += 1;
                }
            }
            Demux::Other => stats.non_udp += 1,
        }
    }
    Ok(out)
}

/// Groups candidates by conversation in order of first appearance, with the
/// first sender of each conversation as its client.
fn flows(candidates: &[Candidate]) -> Vec<(FlowEndpoints, Vec<Candidate>)> {
    let mut index: HashMap<(SocketAddr, SocketAddr), usize> = HashMap::new();
    let mut out: Vec<(FlowEndpoints, Vec<Candidate>)> = Vec::new();
    for c in candidates {
        let slot = *index.entry(flow_key(c.src, c.dst)).or_insert_with(|| {
            out.push((
                FlowEndpoints {
                    client: c.src,
                    server: c.dst,
                },
                Vec::new(),
            ));
            out.len() - 1
        });
        out[slot].1.push(*c);
    }
    out
}

fn build_trace(
    trace_id: &str,
    server_label: &str,
    endpoints: FlowEndpoints,
    packets: &[Candidate],
) -> TraceMeta {
    let mut records: Vec<(Nanos, u32, Direction)> = packets
        .iter()
        .filter_map(|c| {
            resolve_direction(c.src, c.dst, &endpoints)
                .ok()
                .map(|d| (c.timestamp, c.length, d))
        })
        .collect();
    // stable: equal timestamps keep capture order
    records.sort_by_key(|r| r.0);
    let origin = records.first().map_or(Nanos::ZERO, |r| r.0);
    TraceMeta {
        trace_id: trace_id.to_owned(),
        server_label: server_label.to_owned(),
        endpoints: (!records.is_empty()).then_some(endpoints),
        packets: records
            .into_iter()
            .map(|(t, length, direction)| PacketRecord {
                timestamp: t - origin,
                length,
                direction,
            })
            .collect(),
    }
}

/// Parses a classic PCAP capture into the trace of its dominant QUIC
/// conversation.
pub fn parse_pcap(
    data: &[u8],
    trace_id: &str,
    server_label: &str,
    config: &QuicFilterConfig,
) -> Result<Ingested, IngestError> {
    let mut stats = IngestStats::default();
    let candidates = collect_candidates(data, config, &mut stats)?;

    let (endpoints, selected): (Option<FlowEndpoints>, Vec<Candidate>) =
        if let Some(pinned) = config.endpoints {
            let selected: Vec<Candidate> = candidates
                .iter()
                .copied()
                .filter(|c| resolve_direction(c.src, c.dst, &pinned).is_ok())
                .collect();
            (Some(pinned), selected)
        } else {
            let all = flows(&candidates);
            let best = all.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
            let mut top = all.into_iter().filter(|(_, p)| p.len() == best);
            match (top.next(), top.next()) {
                (None, _) => (None, Vec::new()),
                (Some((ep, pkts)), None) => (Some(ep), pkts),
                (Some(first), Some(second)) => {
                    let pairs = [first, second]
                        .into_iter()
                        .chain(top)
                        .map(|(ep, _)| (ep.client, ep.server))
                        .collect();
                    return Err(IngestError::AmbiguousEndpoints { pairs });
                }
            }
        };

    stats.other_flows = candidates.len() - selected.len();
    stats.retained = selected.len();
    let trace = match endpoints {
        Some(ep) => build_trace(trace_id, server_label, ep, &selected),
        None => TraceMeta::empty(trace_id, server_label),
    };
    Ok(Ingested { trace, stats })
}

/// Splits a capture into one trace per QUIC conversation, in order of first
/// appearance. Trace ids get a `#<n>` suffix.
pub fn parse_pcap_flows(
    data: &[u8],
    trace_id: &str,
    server_label: &str,
    config: &QuicFilterConfig,
) -> Result<Vec<TraceMeta>, IngestError> {
    let mut stats = IngestStats::default();
    let candidates = collect_candidates(data, config, &mut stats)?;
    Ok(flows(&candidates)
        .into_iter()
        .enumerate()
        .map(|(n, (ep, pkts))| build_trace(&format!("{trace_id}#{n}"), server_label, ep, &pkts))
        .collect())
}
