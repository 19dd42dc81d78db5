//! Deterministic synthetic capture corpora in the pipeline's input layout.
//!
//! Each trace is an HTTP/3-like exchange: a handshake, then responses that
//! each start with a client request followed by a burst of full-size server
//! packets and sparse client acknowledgements. Every response start is
//! written to the sidecar. A little TCP and DNS traffic is mixed in so the
//! QUIC filter has something to drop.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::synth::{self, CaptureOptions, PcapWriter};
use crate::ingest::{Direction, FlowEndpoints, PacketRecord};
use crate::labels::ResponseEvent;
use crate::pipeline::EVENTS_SUFFIX;
use crate::time::Nanos;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPlan {
    /// (server label, number of traces).
    pub servers: Vec<(String, usize)>,
    /// Trace durations are drawn uniformly from this range, in seconds.
    pub duration: (f64, f64),
    /// Responses per trace are drawn uniformly from this inclusive range.
    pub responses: (u32, u32),
    pub seed: u64,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        CorpusPlan {
            servers: vec![("alpha".into(), 6), ("beta".into(), 6)],
            duration: (0.4, 1.5),
            responses: (1, 25),
            seed: 7,
        }
    }
}

/// A generated trace before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub name: String,
    pub endpoints: FlowEndpoints,
    pub packets: Vec<PacketRecord>,
    /// Response start times, sorted.
    pub responses: Vec<Nanos>,
}

fn micros(rng: &mut ChaCha8Rng, lo: u64, hi: u64) -> Nanos {
    Nanos::from_micros(rng.random_range(lo..=hi))
}

pub fn synthesize_trace(
    name: &str,
    index: u64,
    plan: &CorpusPlan,
    rng: &mut ChaCha8Rng,
) -> SyntheticTrace {
    let client: SocketAddr = format!(
        "10.0.{}.{}:{}",
        index / 200,
        2 + index % 200,
        49152 + index % 16000
    )
    .parse()
    .expect("valid address");
    let server: SocketAddr = "198.51.100.7:443".parse().expect("valid address");
    let endpoints = FlowEndpoints { client, server };

    let duration = Nanos::from_secs_f64(rng.random_range(plan.duration.0..=plan.duration.1))
        .expect("positive duration");
    let mut packets = vec![
        PacketRecord {
            timestamp: Nanos::ZERO,
            length: 1294,
            direction: Direction::ClientToServer,
        },
        PacketRecord {
            timestamp: micros(rng, 8_000, 30_000),
            length: 1294,
            direction: Direction::ServerToClient,
        },
    ];
    let handshake_done = packets[1].timestamp + Nanos::from_micros(500);

    let n = rng.random_range(plan.responses.0..=plan.responses.1);
    let span = duration.0.saturating_sub(handshake_done.0).max(1_000);
    let mut responses: Vec<Nanos> = (0..n)
        .map(|_| {
            // microsecond grid so sidecar and capture agree exactly
            let t = handshake_done.0 + rng.random_range(0..span);
            Nanos::from_micros(t / 1_000)
        })
        .collect();
    responses.sort_unstable();

    for &start in &responses {
        let request_at = start
            .saturating_sub(micros(rng, 200, 3_000))
            .max(handshake_done);
        packets.push(PacketRecord {
            timestamp: request_at,
            length: rng.random_range(80..=320),
            direction: Direction::ClientToServer,
        });
        let burst = rng.random_range(2..=40);
        let mut t = start;
        for k in 0..burst {
            let length = if k + 1 == burst {
                rng.random_range(90..=1300)
            } else {
                rng.random_range(1200..=1392)
            };
            packets.push(PacketRecord {
                timestamp: t,
                length,
                direction: Direction::ServerToClient,
            });
            if k % 3 == 2 {
                packets.push(PacketRecord {
                    timestamp: t + micros(rng, 20, 200),
                    length: rng.random_range(55..=75),
                    direction: Direction::ClientToServer,
                });
            }
            t = t + micros(rng, 100, 2_500);
        }
    }
    packets.sort_by_key(|p| p.timestamp);
    SyntheticTrace {
        name: name.to_owned(),
        endpoints,
        packets,
        responses,
    }
}

/// Capture bytes of a synthetic trace with interleaved non-QUIC noise.
pub fn capture_bytes(trace: &SyntheticTrace, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let opts = CaptureOptions::default();
    let mut w = PcapWriter::new(Vec::new(), opts.link, false, false).expect("vec");
    let dns: SocketAddr = "198.51.100.53:53".parse().expect("valid address");
    let web: SocketAddr = "203.0.113.80:443".parse().expect("valid address");
    for (n, p) in trace.packets.iter().enumerate() {
        let ts = opts.epoch + p.timestamp;
        let (frame, orig) = synth::packet_frame(p, trace.endpoints, opts.link, n == 0);
        w.write_record(ts, orig, &frame).expect("vec");
        if rng.random_ratio(1, 25) {
            let f = synth::udp_frame(opts.link, trace.endpoints.client, dns, &[0x12, 0x34, 1, 0]);
            w.write_record(ts, f.len() as u32, &f).expect("vec");
        }
        if rng.random_ratio(1, 25) {
            let f = synth::tcp_ipv4_ethernet(trace.endpoints.client, web, 0);
            w.write_record(ts, f.len() as u32, &f).expect("vec");
        }
    }
    w.into_inner()
}

/// Writes `<root>/<server>/<trace>.pcap` and `.events.jsonl` files and
/// returns the generated traces per server, in plan order.
pub fn write_corpus(
    root: &Path,
    plan: &CorpusPlan,
) -> io::Result<Vec<(String, Vec<SyntheticTrace>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut out = Vec::new();
    let mut index = 0;
    for (server, count) in &plan.servers {
        let dir = root.join(server);
        fs::create_dir_all(&dir)?;
        let mut traces = Vec::new();
        for k in 0..*count {
            let name = format!("trace-{k:04}");
            let trace = synthesize_trace(&name, index, plan, &mut rng);
            index += 1;
            fs::write(
                dir.join(format!("{name}.pcap")),
                capture_bytes(&trace, &mut rng),
            )?;
            let mut events = String::new();
            for t in &trace.responses {
                let line = serde_json::to_string(&ResponseEvent {
                    trace_id: name.clone(),
                    t: t.as_secs_f64(),
                })
                .map_err(io::Error::other)?;
                events.push_str(&line);
                events.push('\n');
            }
            fs::write(dir.join(format!("{name}{EVENTS_SUFFIX}")), events)?;
            traces.push(trace);
        }
        out.push((server.clone(), traces));
    }
    Ok(out)
}
