//! Sliding time windows and per-window (time, length, direction) histograms.

use std::io::{self, Write};

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Direction, PacketRecord, TraceMeta};
use crate::time::Nanos;

/// Histogram channels in image order: red, then green.
pub const CHANNELS: [Direction; 2] = [Direction::ServerToClient, Direction::ClientToServer];

pub fn channel_index(direction: Direction) -> usize {
    match direction {
        Direction::ServerToClient => 0,
        Direction::ClientToServer => 1,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WindowSpecError {
    #[error("window length must be positive, got {0} s")]
    WindowLength(f64),
    #[error("bin counts must be positive (time bins {time}, length bins {length})")]
    BinCount { time: usize, length: usize },
    #[error("max packet length must be positive")]
    MaxLength,
    #[error("overlap must lie in [0, 1), got {0}")]
    Overlap(f64),
    #[error("window step rounds to zero nanoseconds")]
    ZeroStep,
}

/// Window geometry. Δt = T/M and Δl = L/N are kept as exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    window: Nanos,
    step: Nanos,
    time_bins: usize,
    length_bins: usize,
    max_length: u32,
}

impl WindowSpec {
    /// `window_secs` is T, `overlap` the shared fraction of consecutive
    /// windows; the step is T·(1 − overlap) rounded to the nanosecond.
    pub fn new(
        window_secs: f64,
        time_bins: usize,
        length_bins: usize,
        max_length: u32,
        overlap: f64,
    ) -> Result<WindowSpec, WindowSpecError> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(WindowSpecError::Overlap(overlap));
        }
        let window = Nanos::from_secs_f64(window_secs)
            .filter(|w| w.0 > 0)
            .ok_or(WindowSpecError::WindowLength(window_secs))?;
        let step = Nanos::from_secs_f64(window_secs * (1.0 - overlap))
            .filter(|s| s.0 > 0)
            .ok_or(WindowSpecError::ZeroStep)?;
        WindowSpec::from_parts(window, step, time_bins, length_bins, max_length)
    }

    pub fn from_parts(
        window: Nanos,
        step: Nanos,
        time_bins: usize,
        length_bins: usize,
        max_length: u32,
    ) -> Result<WindowSpec, WindowSpecError> {
        if window.0 == 0 {
            return Err(WindowSpecError::WindowLength(0.0));
        }
        if step.0 == 0 {
            return Err(WindowSpecError::ZeroStep);
        }
        if time_bins == 0 || length_bins == 0 {
            return Err(WindowSpecError::BinCount {
                time: time_bins,
                length: length_bins,
            });
        }
        if max_length == 0 {
            return Err(WindowSpecError::MaxLength);
        }
        Ok(WindowSpec {
            window,
            step,
            time_bins,
            length_bins,
            max_length,
        })
    }

    pub fn window(&self) -> Nanos {
        self.window
    }
    pub fn step(&self) -> Nanos {
        self.step
    }
    pub fn time_bins(&self) -> usize {
        self.time_bins
    }
    pub fn length_bins(&self) -> usize {
        self.length_bins
    }
    pub fn max_length(&self) -> u32 {
        self.max_length
    }

    /// Δt in nanoseconds.
    pub fn time_bin_width(&self) -> Ratio<u64> {
        Ratio::new(self.window.0, self.time_bins as u64)
    }

    /// Δl in bytes.
    pub fn length_bin_width(&self) -> Ratio<u64> {
        Ratio::new(u64::from(self.max_length), self.length_bins as u64)
    }

    /// Length bin of a packet; lengths at or above L land in the last bin.
    pub fn length_bin(&self, length: u32) -> usize {
        let j = u64::from(length) * self.length_bins as u64 / u64::from(self.max_length);
        (j as usize).min(self.length_bins - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub index: usize,
    pub start: Nanos,
}

impl Window {
    pub fn end(&self, spec: &WindowSpec) -> Nanos {
        self.start + spec.window
    }
}

/// Window starts 0, step, 2·step, … up to and including the trace duration.
/// An empty trace still gets the window at zero.
pub fn enumerate_windows(duration: Nanos, spec: &WindowSpec) -> Vec<Window> {
    let count = duration.0 / spec.step.0 + 1;
    (0..count)
        .map(|k| Window {
            index: k as usize,
            start: Nanos(k * spec.step.0),
        })
        .collect()
}

/// (time bin, length bin) of a packet in the window starting at
/// `window_start`, or `None` outside `[start, start + T)`.
pub fn bin_packet(
    packet: &PacketRecord,
    window_start: Nanos,
    spec: &WindowSpec,
) -> Option<(usize, usize)> {
    if packet.timestamp < window_start || packet.timestamp >= window_start + spec.window {
        return None;
    }
    let offset = u128::from((packet.timestamp - window_start).0);
    let i = offset * spec.time_bins as u128 / u128::from(spec.window.0);
    let i = (i as usize).min(spec.time_bins - 1);
    Some((i, spec.length_bin(packet.length)))
}

/// Packet counts of one window, indexed (channel, time bin, length bin).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowHistogram {
    pub trace_id: String,
    pub window: Window,
    time_bins: usize,
    length_bins: usize,
    counts: Vec<u32>,
}

impl WindowHistogram {
    pub fn zeros(
        trace_id: impl Into<String>,
        window: Window,
        time_bins: usize,
        length_bins: usize,
    ) -> WindowHistogram {
        WindowHistogram {
            trace_id: trace_id.into(),
            window,
            time_bins,
            length_bins,
            counts: vec![0; 2 * time_bins * length_bins],
        }
    }

    pub fn time_bins(&self) -> usize {
        self.time_bins
    }
    pub fn length_bins(&self) -> usize {
        self.length_bins
    }

    fn offset(&self, i: usize, j: usize, channel: usize) -> usize {
        assert!(i < self.time_bins && j < self.length_bins && channel < 2);
        (channel * self.time_bins + i) * self.length_bins + j
    }

    pub fn get(&self, i: usize, j: usize, direction: Direction) -> u32 {
        self.counts[self.offset(i, j, channel_index(direction))]
    }

    pub fn increment(&mut self, i: usize, j: usize, direction: Direction) {
        let o = self.offset(i, j, channel_index(direction));
        self.counts[o] += 1;
    }

    /// All M·N counts of one direction, time-major.
    pub fn channel(&self, direction: Direction) -> &[u32] {
        let plane = self.time_bins * self.length_bins;
        let c = channel_index(direction);
        &self.counts[c * plane..(c + 1) * plane]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// One `i,j,channel,count` row per cell, channel as `s2c` or `c2s`.
    pub fn write_debug_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "i,j,channel,count")?;
        for direction in CHANNELS {
            let name = match direction {
                Direction::ServerToClient => "s2c",
                Direction::ClientToServer => "c2s",
            };
            for i in 0..self.time_bins {
                for j in 0..self.length_bins {
                    writeln!(out, "{i},{j},{name},{}", self.get(i, j, direction))?;
                }
            }
        }
        Ok(())
    }
}

/// Counts the trace's packets falling into `window`. Packets must be sorted
/// by timestamp, as [`crate::ingest::parse_pcap`] guarantees.
pub fn build_histogram(trace: &TraceMeta, window: Window, spec: &WindowSpec) -> WindowHistogram {
    let mut hist = WindowHistogram::zeros(
        trace.trace_id.clone(),
        window,
        spec.time_bins,
        spec.length_bins,
    );
    let end = window.end(spec);
    let first = trace
        .packets
        .partition_point(|p| p.timestamp < window.start);
    for packet in trace.packets[first..]
        .iter()
        .take_while(|p| p.timestamp < end)
    {
        if let Some((i, j)) = bin_packet(packet, window.start, spec) {
            hist.increment(i, j, packet.direction);
        }
    }
    hist
}

/// Histograms of every window of the trace, in window order.
pub fn trace_histograms(trace: &TraceMeta, spec: &WindowSpec) -> Vec<WindowHistogram> {
    enumerate_windows(trace.duration(), spec)
        .into_par_iter()
        .map(|w| build_histogram(trace, w, spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: f64, overlap: f64) -> WindowSpec {
        WindowSpec::new(t, 32, 32, 1500, overlap).unwrap()
    }

    fn pkt(ns: u64, length: u32, direction: Direction) -> PacketRecord {
        PacketRecord {
            timestamp: Nanos(ns),
            length,
            direction,
        }
    }

    fn starts(duration_s: f64, s: &WindowSpec) -> Vec<u64> {
        enumerate_windows(Nanos::from_secs_f64(duration_s).unwrap(), s)
            .iter()
            .map(|w| w.start.0)
            .collect()
    }

    #[test]
    fn rejects_invalid_specs() {
        assert_eq!(
            WindowSpec::new(0.1, 32, 32, 1500, 1.0),
            Err(WindowSpecError::Overlap(1.0))
        );
        assert!(WindowSpec::new(0.0, 32, 32, 1500, 0.0).is_err());
        assert!(WindowSpec::new(-0.1, 32, 32, 1500, 0.0).is_err());
        assert!(WindowSpec::new(0.1, 0, 32, 1500, 0.0).is_err());
        assert!(WindowSpec::new(0.1, 32, 32, 0, 0.0).is_err());
        assert_eq!(
            WindowSpec::new(1e-9, 32, 32, 1500, 0.9),
            Err(WindowSpecError::ZeroStep)
        );
    }

    #[test]
    fn window_starts() {
        let ms = 1_000_000;
        assert_eq!(
            starts(1.0, &spec(0.3, 0.0)),
            vec![0, 300 * ms, 600 * ms, 900 * ms]
        );
        assert_eq!(starts(0.05, &spec(0.1, 0.0)), vec![0]);
        let dense = starts(0.25, &spec(0.1, 0.9));
        assert_eq!(dense.len(), 26);
        assert_eq!(*dense.last().unwrap(), 250 * ms);
        assert_eq!(starts(0.0, &spec(0.1, 0.0)), vec![0]);
    }

    #[test]
    fn bin_widths_are_exact_rationals() {
        let s = spec(0.3, 0.0);
        assert_eq!(s.time_bin_width(), Ratio::new(9_375_000, 1));
        assert_eq!(s.length_bin_width(), Ratio::new(375, 8));
    }

    #[test]
    fn binning_examples() {
        let s = spec(0.3, 0.0);
        let start = Nanos(1_000_000_000);
        let p = pkt(start.0 + 70_000_000, 1200, Direction::ServerToClient);
        assert_eq!(bin_packet(&p, start, &s).map(|b| b.0), Some(7));
        let p = pkt(start.0, 1500, Direction::ServerToClient);
        assert_eq!(bin_packet(&p, start, &s), Some((0, 31)));
        let p = pkt(start.0, 9000, Direction::ServerToClient);
        assert_eq!(bin_packet(&p, start, &s), Some((0, 31)));
        let p = pkt(start.0 + 300_000_000, 100, Direction::ServerToClient);
        assert_eq!(bin_packet(&p, start, &s), None);
        let p = pkt(start.0 + 299_999_999, 100, Direction::ServerToClient);
        assert_eq!(bin_packet(&p, start, &s), Some((31, 2)));
        let p = pkt(start.0 - 1, 100, Direction::ServerToClient);
        assert_eq!(bin_packet(&p, start, &s), None);
    }

    #[test]
    fn length_bin_edges_are_half_open() {
        let s = spec(0.1, 0.0);
        // Δl = 46.875: 46 -> 0, 47 -> 1, 93 -> 1, 94 -> 2
        assert_eq!(s.length_bin(0), 0);
        assert_eq!(s.length_bin(46), 0);
        assert_eq!(s.length_bin(47), 1);
        assert_eq!(s.length_bin(93), 1);
        assert_eq!(s.length_bin(94), 2);
        assert_eq!(s.length_bin(1453), 30);
        assert_eq!(s.length_bin(1454), 31);
    }

    #[test]
    fn walkthrough_column_sums() {
        // 10 server and 19 client packets inside time bin 7 of a 0.3 s window
        let s = spec(0.3, 0.0);
        let mut packets = Vec::new();
        for k in 0..29u64 {
            let t = 66_000_000 + k * 100_000;
            let dir = if k < 10 {
                Direction::ServerToClient
            } else {
                Direction::ClientToServer
            };
            packets.push(pkt(t, 100 + 40 * k as u32, dir));
        }
        let trace = TraceMeta {
            packets,
            ..TraceMeta::empty("t", "s")
        };
        let h = build_histogram(
            &trace,
            Window {
                index: 0,
                start: Nanos(0),
            },
            &s,
        );
        let col = |d| (0..32).map(|j| h.get(7, j, d)).sum::<u32>();
        assert_eq!(col(Direction::ServerToClient), 10);
        assert_eq!(col(Direction::ClientToServer), 19);
        assert_eq!(h.total(), 29);
    }

    #[test]
    fn empty_window_is_all_zero() {
        let trace = TraceMeta {
            packets: vec![pkt(5, 100, Direction::ClientToServer)],
            ..TraceMeta::empty("t", "s")
        };
        let h = build_histogram(
            &trace,
            Window {
                index: 3,
                start: Nanos(1_000_000_000),
            },
            &spec(0.1, 0.0),
        );
        assert!(h.is_empty());
    }

    #[test]
    fn debug_csv_has_every_cell() {
        let h = WindowHistogram::zeros(
            "t",
            Window {
                index: 0,
                start: Nanos(0),
            },
            2,
            3,
        );
        let mut out = Vec::new();
        h.write_debug_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2 * 3);
        assert!(text.contains("1,2,c2s,0"));
    }
}
