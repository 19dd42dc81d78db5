#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use quicpic_core::window::CHANNELS;
use quicpic_core::{
    Direction, Nanos, PacketRecord, TraceMeta, Window, WindowHistogram, WindowSpec,
};

/// A sorted random trace starting at zero with up to `max_packets` packets.
pub fn random_trace(rng: &mut ChaCha8Rng, max_packets: usize, span: Nanos) -> TraceMeta {
    let n = rng.random_range(1..=max_packets);
    let mut packets: Vec<PacketRecord> = (0..n)
        .map(|_| PacketRecord {
            timestamp: Nanos(rng.random_range(0..=span.0)),
            length: rng.random_range(1..=1600),
            direction: if rng.random_bool(0.5) {
                Direction::ClientToServer
            } else {
                Direction::ServerToClient
            },
        })
        .collect();
    packets.sort_by_key(|p| p.timestamp);
    let t0 = packets[0].timestamp;
    for p in &mut packets {
        p.timestamp = p.timestamp - t0;
    }
    TraceMeta {
        trace_id: "srv/trace".into(),
        server_label: "srv".into(),
        endpoints: None,
        packets,
    }
}

/// Membership by exhaustive search over the bin grid:
/// i·T ≤ offset·M < (i+1)·T and j·L ≤ len·N < (j+1)·L, lengths ≥ L in the
/// last row.
pub fn oracle_histogram(trace: &TraceMeta, window: Window, spec: &WindowSpec) -> WindowHistogram {
    let (m, n) = (spec.time_bins(), spec.length_bins());
    let t = u128::from(spec.window().0);
    let l = u128::from(spec.max_length());
    let mut hist = WindowHistogram::zeros(trace.trace_id.clone(), window, m, n);
    for p in &trace.packets {
        if p.timestamp < window.start || p.timestamp >= window.start + spec.window() {
            continue;
        }
        let offset = u128::from((p.timestamp - window.start).0);
        let i = (0..m)
            .find(|&i| {
                i as u128 * t <= offset * m as u128 && offset * (m as u128) < (i as u128 + 1) * t
            })
            .expect("offset inside the window");
        let len = u128::from(p.length);
        let j = (0..n)
            .find(|&j| j as u128 * l <= len * n as u128 && len * (n as u128) < (j as u128 + 1) * l)
            .unwrap_or(n - 1);
        hist.increment(i, j, p.direction);
    }
    hist
}

pub fn random_histogram(
    rng: &mut ChaCha8Rng,
    m: usize,
    n: usize,
    max_count: u32,
) -> WindowHistogram {
    let mut h = WindowHistogram::zeros(
        "srv/trace",
        Window {
            index: 0,
            start: Nanos::ZERO,
        },
        m,
        n,
    );
    let density = rng.random_range(0.0..1.0);
    for d in CHANNELS {
        for i in 0..m {
            for j in 0..n {
                if rng.random_bool(density) {
                    let c = rng.random_range(0..=max_count);
                    for _ in 0..c {
                        h.increment(i, j, d);
                    }
                }
            }
        }
    }
    h
}

/// `windows` samples for each of `traces` traces on each server.
pub fn sample_refs(
    servers: &[(&str, usize)],
    windows: usize,
) -> Vec<quicpic_core::labels::SampleRef> {
    let mut out = Vec::new();
    for (server, traces) in servers {
        for t in 0..*traces {
            for w in 0..windows {
                out.push(quicpic_core::labels::SampleRef {
                    id: quicpic_core::SampleId {
                        trace_id: format!("{server}/trace{t:03}"),
                        window_index: w,
                    },
                    server_label: server.to_string(),
                });
            }
        }
    }
    out
}

/// Trace id of a `trace_id/window_index` sample id.
pub fn trace_of(sample_id: &str) -> &str {
    sample_id.rsplit_once('/').unwrap().0
}

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Largest per-component relative error between an analytic gradient and
/// central differences of `f`, relative to max(|a|, |n|, 1e-3).
pub fn gradient_error<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + FD_STEP;
        let up = f(&probe);
        probe[k] = x[k] - FD_STEP;
        let down = f(&probe);
        probe[k] = x[k];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = analytic[k].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[k] - numeric).abs() / scale);
    }
    worst
}

pub fn random_logits(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()
}

/// Writes `<root>/<server>/<name>.pcap` from packet metadata plus a sidecar
/// with one event per entry of `responses` (seconds).
pub fn write_trace(
    root: &std::path::Path,
    server: &str,
    name: &str,
    packets: &[PacketRecord],
    responses: &[f64],
) {
    use quicpic_core::ingest::synth::{capture, CaptureOptions};
    let dir = root.join(server);
    std::fs::create_dir_all(&dir).unwrap();
    let endpoints = quicpic_core::FlowEndpoints {
        client: "10.1.1.1:50000".parse().unwrap(),
        server: "10.2.2.2:443".parse().unwrap(),
    };
    std::fs::write(
        dir.join(format!("{name}.pcap")),
        capture(packets, endpoints, CaptureOptions::default()),
    )
    .unwrap();
    let events: String = responses
        .iter()
        .map(|t| format!("{{\"trace_id\":\"{name}\",\"t\":{t}}}\n"))
        .collect();
    std::fs::write(dir.join(format!("{name}.events.jsonl")), events).unwrap();
}

/// Every file under `root` by relative path.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        base: &std::path::Path,
        dir: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn pkt(ms: u64, length: u32, direction: Direction) -> PacketRecord {
    PacketRecord {
        timestamp: Nanos(ms * 1_000_000),
        length,
        direction,
    }
}

/// A fixed window: a diagonal server burst and a sparse client column.
pub fn golden_histogram() -> WindowHistogram {
    let mut h = WindowHistogram::zeros(
        "golden/trace",
        Window {
            index: 0,
            start: Nanos::ZERO,
        },
        32,
        32,
    );
    for k in 0..32 {
        for _ in 0..=(k % 5) {
            h.increment(k, 31 - k, Direction::ServerToClient);
        }
        if k % 4 == 0 {
            h.increment(3, k, Direction::ClientToServer);
        }
    }
    h.increment(3, 1, Direction::ClientToServer);
    h
}
