//! Histogram to RGB image rendering, content digests, dedup and PNG I/O.
//!
//! Each direction channel is min-max normalized on its own, over either the
//! window's bins or every bin of the trace, then scaled to 0..=255 with
//! round-half-up. Red carries server-to-client counts, green
//! client-to-server, blue is always zero.
//!
//! Image orientation: time bin `i` is the column (x), length bin `j` the row
//! (y), origin at the top-left. PNG width is the number of time bins.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::Direction;
use crate::window::{Window, WindowHistogram, CHANNELS};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("per-trace normalization needs trace statistics")]
    MissingTraceStats,
    #[error("i/o failure on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("png encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decoding failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    #[default]
    PerWindow,
    PerTrace,
}

/// Smallest and largest count of one channel over some set of bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: u32,
    pub max: u32,
}

impl ChannelRange {
    fn of(counts: &[u32]) -> ChannelRange {
        let min = counts.iter().copied().min().unwrap_or(0);
        let max = counts.iter().copied().max().unwrap_or(0);
        ChannelRange { min, max }
    }

    fn merge(self, other: ChannelRange) -> ChannelRange {
        ChannelRange {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Per-channel ranges over every bin of every window of a trace, in channel
/// order (server-to-client, client-to-server).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStats(pub [ChannelRange; 2]);

impl TraceStats {
    /// `None` when there are no histograms.
    pub fn collect<'a, I>(histograms: I) -> Option<TraceStats>
    where
        I: IntoIterator<Item = &'a WindowHistogram>,
    {
        histograms
            .into_iter()
            .map(window_ranges)
            .reduce(|a, b| TraceStats([a.0[0].merge(b.0[0]), a.0[1].merge(b.0[1])]))
    }
}

fn window_ranges(hist: &WindowHistogram) -> TraceStats {
    TraceStats(CHANNELS.map(|d| ChannelRange::of(hist.channel(d))))
}

/// Min-max normalization. A degenerate range maps any positive value to 1
/// and zero to 0; values are clamped into `[min, max]`.
pub fn normalize(value: u32, min: u32, max: u32) -> f64 {
    if max <= min {
        return if value > 0 { 1.0 } else { 0.0 };
    }
    let v = value.clamp(min, max);
    f64::from(v - min) / f64::from(max - min)
}

/// `round_half_up(normalize(value, min, max) * 255)`, in exact integer
/// arithmetic.
pub fn intensity(value: u32, min: u32, max: u32) -> u8 {
    if max <= min {
        return if value > 0 { 255 } else { 0 };
    }
    let num = u64::from(value.clamp(min, max) - min) * 255;
    let den = u64::from(max - min);
    ((2 * num + den) / (2 * den)) as u8
}

/// 8-bit RGB rendering of one window plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficImage {
    pub trace_id: String,
    pub window: Window,
    width: usize,
    height: usize,
    /// Row-major: row `j` (length bin), column `i` (time bin).
    pixels: Vec<[u8; 3]>,
}

impl TrafficImage {
    pub fn black(
        trace_id: impl Into<String>,
        window: Window,
        time_bins: usize,
        length_bins: usize,
    ) -> TrafficImage {
        TrafficImage {
            trace_id: trace_id.into(),
            window,
            width: time_bins,
            height: length_bins,
            pixels: vec![[0; 3]; time_bins * length_bins],
        }
    }

    /// Builds an image from row-major RGB bytes.
    pub fn from_raster(
        trace_id: impl Into<String>,
        window: Window,
        width: usize,
        height: usize,
        rgb: &[u8],
    ) -> Option<TrafficImage> {
        if rgb.len() != width * height * 3 {
            return None;
        }
        Some(TrafficImage {
            trace_id: trace_id.into(),
            window,
            width,
            height,
            pixels: rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    /// Number of time bins.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of length bins.
    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel at time bin `i`, length bin `j`.
    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        self.pixels[j * self.width + i]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, rgb: [u8; 3]) {
        self.pixels[j * self.width + i] = rgb;
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[u8; 3]] {
        &mut self.pixels
    }

    pub fn raster(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }

    pub fn is_black(&self) -> bool {
        self.pixels.iter().all(|p| *p == [0, 0, 0])
    }
}

pub fn render(
    hist: &WindowHistogram,
    mode: NormalizationMode,
    trace_stats: Option<&TraceStats>,
) -> Result<TrafficImage, RenderError> {
    let ranges = match mode {
        NormalizationMode::PerWindow => window_ranges(hist),
        NormalizationMode::PerTrace => *trace_stats.ok_or(RenderError::MissingTraceStats)?,
    };
    let mut img = TrafficImage::black(
        hist.trace_id.clone(),
        hist.window,
        hist.time_bins(),
        hist.length_bins(),
    );
    for (c, direction) in CHANNELS.into_iter().enumerate() {
        let range = ranges.0[c];
        for i in 0..hist.time_bins() {
            for j in 0..hist.length_bins() {
                let v = intensity(hist.get(i, j, direction), range.min, range.max);
                img.pixels[j * img.width + i][c] = v;
            }
        }
    }
    Ok(img)
}

/// Channel of the RGB triple carrying a direction.
pub fn rgb_channel(direction: Direction) -> usize {
    crate::window::channel_index(direction)
}

/// SHA-256 over the dimensions and pixel bytes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageDigest(pub [u8; 32]);

impl fmt::Display for ImageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

pub fn image_digest(img: &TrafficImage) -> ImageDigest {
    let mut h = Sha256::new();
    h.update((img.width as u32).to_le_bytes());
    h.update((img.height as u32).to_le_bytes());
    for p in &img.pixels {
        h.update(p);
    }
    ImageDigest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input: u64,
    pub kept: u64,
    pub dropped: u64,
}

/// Streaming dedup keyed on (digest, label); the first occurrence wins.
#[derive(Debug, Default)]
pub struct Deduplicator {
    seen: HashSet<(ImageDigest, u32)>,
    report: DedupReport,
}

impl Deduplicator {
    pub fn new() -> Deduplicator {
        Deduplicator::default()
    }

    /// True when this (digest, label) pair has not been seen before.
    pub fn keep(&mut self, digest: ImageDigest, label: u32) -> bool {
        self.report.input += 1;
        let fresh = self.seen.insert((digest, label));
        if fresh {
            self.report.kept += 1;
        } else {
            self.report.dropped += 1;
        }
        fresh
    }

    pub fn report(&self) -> DedupReport {
        self.report
    }
}

pub fn dedup<I>(items: I) -> (Vec<(TrafficImage, u32)>, DedupReport)
where
    I: IntoIterator<Item = (TrafficImage, u32)>,
{
    let mut d = Deduplicator::new();
    let kept = items
        .into_iter()
        .filter(|(img, label)| d.keep(image_digest(img), *label))
        .collect();
    (kept, d.report())
}

/// 8-bit RGB, non-interlaced, balanced deflate with adaptive filtering.
pub fn encode_png(img: &TrafficImage) -> Result<Vec<u8>, RenderError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&img.raster())?;
        writer.finish()?;
    }
    Ok(out)
}

pub fn write_png(img: &TrafficImage, path: &Path) -> Result<(), RenderError> {
    let bytes = encode_png(img)?;
    let io_err = |source| RenderError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io_err)?);
    f.write_all(&bytes).map_err(io_err)?;
    f.flush().map_err(io_err)
}

/// Decodes an 8-bit RGB PNG to (width, height, row-major RGB bytes).
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), RenderError> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RenderError::Layout("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(RenderError::Layout(format!(
            "{:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>), RenderError> {
    let bytes = std::fs::read(path).map_err(|source| RenderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}
