//! End-to-end dataset construction over a directory of captures.
//!
//! Input layout is `<root>/<server_label>/<name>.pcap` with labels in a
//! sibling `<name>.events.jsonl`. Traces are processed in parallel, then
//! merged in `(trace_id, window_index)` order before dedup and writing, so
//! outputs do not depend on scheduling. Everything is written to a staging
//! directory next to the output root and moved into place on success.

mod config;
mod evaluate;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{parse_pcap, IngestError, IngestStats};
use crate::labels::{
    event_times, label_window, read_events, split, LabelError, SampleId, SampleRef, TooFewPolicy,
};
use crate::render::{image_digest, render, write_png, Deduplicator, RenderError, TraceStats};
use crate::window::{trace_histograms, WindowSpecError};

pub use config::{PipelineConfig, SplitSetting};
pub use evaluate::{evaluate, read_predictions, EvaluateOptions};
pub use manifest::{ManifestRow, ManifestStats, RowStatus, ServerStatsRow};

pub const PCAP_EXTENSION: &str = "pcap";
pub const EVENTS_SUFFIX: &str = ".events.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Window(#[from] WindowSpecError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Ingest { path: PathBuf, source: IngestError },
    #[error("{path}: {source}")]
    Label { path: PathBuf, source: LabelError },
    #[error(transparent)]
    Split(LabelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("missing event sidecar {0}")]
    MissingSidecar(PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("prediction for unknown sample {0}")]
    UnknownSampleId(String),
    #[error("no prediction for sample {0}")]
    MissingPrediction(String),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// Stable identifier for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::Window(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Ingest { source, .. } => match source {
                IngestError::MalformedHeader(_) => "malformed_header",
                IngestError::UnsupportedLinkType(_) => "unsupported_link_type",
                IngestError::TruncatedPacket { .. } => "truncated_packet",
                IngestError::AmbiguousEndpoints { .. } => "ambiguous_endpoints",
            },
            PipelineError::Label { .. } => "invalid_events",
            PipelineError::Split(LabelError::TooFewTraces { .. }) => "too_few_traces",
            PipelineError::Split(LabelError::InvalidHoldoutCount { .. }) => "invalid_holdout_count",
            PipelineError::Split(_) => "split",
            PipelineError::Render(_) => "render",
            PipelineError::MissingSidecar(_) => "missing_sidecar",
            PipelineError::MalformedManifest(_) => "malformed_manifest",
            PipelineError::MalformedInput(_) => "malformed_input",
            PipelineError::UnknownSampleId(_) => "unknown_sample_id",
            PipelineError::MissingPrediction(_) => "missing_prediction",
            PipelineError::Metric(_) => "metric",
            PipelineError::Csv(_) => "csv",
        }
    }

    /// File the error concerns, when there is one.
    pub fn path(&self) -> Option<&Path> {
        match self {
            PipelineError::Io { path, .. }
            | PipelineError::Ingest { path, .. }
            | PipelineError::Label { path, .. }
            | PipelineError::MissingSidecar(path) => Some(path),
            _ => None,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

/// A capture found under the input root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSource {
    pub server_label: String,
    pub name: String,
    pub pcap: PathBuf,
    pub events: PathBuf,
}

impl TraceSource {
    pub fn trace_id(&self) -> String {
        format!("{}/{}", self.server_label, self.name)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

/// Captures under `root`, sorted by trace id. Files directly under the root
/// are ignored.
pub fn discover(root: &Path) -> Result<Vec<TraceSource>, PipelineError> {
    let mut out = Vec::new();
    for server_dir in sorted_entries(root)? {
        if !server_dir.is_dir() {
            log::warn!(
                "ignoring {} outside a server directory",
                server_dir.display()
            );
            continue;
        }
        let Some(server_label) = server_dir.file_name().and_then(|s| s.to_str()) else {
            continue;
        };
        for path in sorted_entries(&server_dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some(PCAP_EXTENSION) || !path.is_file()
            {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            out.push(TraceSource {
                server_label: server_label.to_owned(),
                name: name.to_owned(),
                events: server_dir.join(format!("{name}{EVENTS_SUFFIX}")),
                pcap: path.clone(),
            });
        }
    }
    out.sort_by_key(|t| t.trace_id());
    Ok(out)
}

struct WindowResult {
    index: usize,
    start: crate::time::Nanos,
    label: u32,
    image: crate::render::TrafficImage,
}

struct TraceResult {
    source: TraceSource,
    stats: IngestStats,
    windows: Vec<WindowResult>,
}

fn process_trace(
    source: &TraceSource,
    cfg: &PipelineConfig,
    spec: &crate::window::WindowSpec,
) -> Result<TraceResult, PipelineError> {
    let trace_id = source.trace_id();
    let bytes = fs::read(&source.pcap).map_err(io_err(&source.pcap))?;
    let ingested =
        parse_pcap(&bytes, &trace_id, &source.server_label, &cfg.filter()).map_err(|e| {
            PipelineError::Ingest {
                path: source.pcap.clone(),
                source: e,
            }
        })?;
    if ingested.no_quic_traffic() {
        log::warn!("{}: no QUIC traffic", source.pcap.display());
    }

    if !source.events.is_file() {
        return Err(PipelineError::MissingSidecar(source.events.clone()));
    }
    let file = File::open(&source.events).map_err(io_err(&source.events))?;
    let events = read_events(BufReader::new(file)).map_err(|e| PipelineError::Label {
        path: source.events.clone(),
        source: e,
    })?;
    let foreign = events
        .iter()
        .filter(|e| e.trace_id != source.name && e.trace_id != trace_id)
        .count();
    if foreign > 0 {
        log::warn!(
            "{}: ignoring {foreign} events for other traces",
            source.events.display()
        );
    }
    let mut times = event_times(&events, &source.name);
    times.extend(event_times(&events, &trace_id));
    times.sort_unstable();

    let hists = trace_histograms(&ingested.trace, spec);
    let trace_stats = TraceStats::collect(&hists);
    let windows = hists
        .iter()
        .map(|h| {
            Ok(WindowResult {
                index: h.window.index,
                start: h.window.start,
                label: label_window(&times, h.window.start, spec.window()),
                image: render(h, cfg.normalize, trace_stats.as_ref())?,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(TraceResult {
        source: source.clone(),
        stats: ingested.stats,
        windows,
    })
}

/// Counters of one run, also printed as the CLI summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub traces: u64,
    pub windows: u64,
    pub admitted: u64,
    pub rejected: u64,
    pub duplicates: u64,
    pub train: u64,
    pub test: u64,
    pub flagged_servers: Vec<String>,
    pub out: PathBuf,
}

/// `dedup_report.json`: dedup counts plus capture-level filtering counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupFile {
    pub input: u64,
    pub kept: u64,
    pub dropped: u64,
    pub packets: u64,
    pub non_udp_packets: u64,
    pub non_quic_packets: u64,
    pub other_flow_packets: u64,
}

fn staging_dir(out: &Path) -> Result<PathBuf, PipelineError> {
    let name = out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| PipelineError::Config(format!("bad output path {}", out.display())))?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    Ok(parent.join(format!(".{name}.partial-{}", std::process::id())))
}

fn promote(staging: &Path, out: &Path) -> Result<(), PipelineError> {
    if out.exists() {
        let old = staging.with_extension("old");
        fs::rename(out, &old).map_err(io_err(out))?;
        fs::rename(staging, out).map_err(io_err(out))?;
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    } else {
        fs::rename(staging, out).map_err(io_err(out))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| io_err(path)(io::Error::other(e)))?;
    writeln!(f).and_then(|_| f.flush()).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Runs ingest, windowing, rendering, labeling, dedup and splitting over
/// `input`, writing `images/`, `manifest.csv`, `splits.json`, `stats.csv`,
/// `distribution.csv` and `dedup_report.json` under `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig, input: &Path) -> Result<RunSummary, PipelineError> {
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?
            .install(|| run_in_pool(cfg, input)),
        None => run_in_pool(cfg, input),
    }
}

fn run_in_pool(cfg: &PipelineConfig, input: &Path) -> Result<RunSummary, PipelineError> {
    let spec = cfg.window_spec()?;
    if cfg.quic_ports.is_empty() {
        return Err(PipelineError::Config("quic_ports is empty".into()));
    }
    let websites = match &cfg.websites {
        Some(p) => manifest::read_websites(File::open(p).map_err(io_err(p))?)?,
        None => BTreeMap::new(),
    };
    let sources = discover(input)?;
    log::info!("{} captures under {}", sources.len(), input.display());

    let results = sources
        .par_iter()
        .map(|s| process_trace(s, cfg, &spec))
        .collect::<Result<Vec<_>, _>>()?;

    let staging = staging_dir(&cfg.out)?;
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let outcome = write_outputs(cfg, &results, &websites, &staging);
    match outcome {
        Ok(mut summary) => {
            promote(&staging, &cfg.out)?;
            summary.out = cfg.out.clone();
            Ok(summary)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_outputs(
    cfg: &PipelineConfig,
    results: &[TraceResult],
    websites: &BTreeMap<String, u64>,
    root: &Path,
) -> Result<RunSummary, PipelineError> {
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let mut dedup = Deduplicator::new();
    let mut rows = Vec::new();
    let mut to_write = Vec::new();
    let mut dedup_file = DedupFile::default();
    let mut summary = RunSummary {
        traces: results.len() as u64,
        ..RunSummary::default()
    };

    for trace in results {
        let s = &trace.stats;
        dedup_file.packets += s.records as u64;
        dedup_file.non_udp_packets += s.non_udp as u64;
        dedup_file.non_quic_packets += s.non_quic as u64;
        dedup_file.other_flow_packets += s.other_flows as u64;
        let trace_id = trace.source.trace_id();
        for w in &trace.windows {
            summary.windows += 1;
            let digest = image_digest(&w.image);
            let fresh = !cfg.dedup || dedup.keep(digest, w.label);
            let status = if !fresh {
                RowStatus::Duplicate
            } else if w.label > cfg.max_label {
                RowStatus::Rejected
            } else {
                RowStatus::Admitted
            };
            let png_path = if status == RowStatus::Duplicate {
                String::new()
            } else {
                let rel = format!(
                    "images/{}/{}/{:06}.png",
                    trace.source.server_label, trace.source.name, w.index
                );
                to_write.push((rel.clone(), &w.image));
                rel
            };
            match status {
                RowStatus::Admitted => summary.admitted += 1,
                RowStatus::Rejected => summary.rejected += 1,
                RowStatus::Duplicate => summary.duplicates += 1,
            }
            rows.push(ManifestRow {
                sample_id: SampleId {
                    trace_id: trace_id.clone(),
                    window_index: w.index,
                }
                .to_string(),
                trace_id: trace_id.clone(),
                window_index: w.index,
                window_start: w.start.to_string(),
                label: w.label,
                admitted: status == RowStatus::Admitted,
                digest: digest.to_string(),
                png_path,
                server_label: trace.source.server_label.clone(),
                status,
            });
        }
    }
    if cfg.dedup {
        let r = dedup.report();
        (dedup_file.input, dedup_file.kept, dedup_file.dropped) = (r.input, r.kept, r.dropped);
    } else {
        dedup_file.input = summary.windows;
        dedup_file.kept = summary.windows;
    }

    to_write
        .par_iter()
        .map(|(rel, img)| {
            let path = root.join(rel);
            let dir = path.parent().expect("image paths have a parent");
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            write_png(img, &path).map_err(PipelineError::from)
        })
        .collect::<Result<(), _>>()?;

    manifest::write_manifest(create(&root.join("manifest.csv"))?, &rows)?;

    let refs: Vec<SampleRef> = rows
        .iter()
        .filter(|r| r.status == RowStatus::Admitted)
        .map(|r| SampleRef {
            id: SampleId {
                trace_id: r.trace_id.clone(),
                window_index: r.window_index,
            },
            server_label: r.server_label.clone(),
        })
        .collect();
    let splits = split(&refs, &cfg.split_mode(), cfg.seed, TooFewPolicy::Flag)
        .map_err(PipelineError::Split)?;
    for server in &splits.flagged_servers {
        log::warn!("server {server}: too few traces for an 80:20 split, left out of both sides");
    }
    summary.train = splits.train.len() as u64;
    summary.test = splits.test.len() as u64;
    summary.flagged_servers = splits.flagged_servers.clone();
    write_json(&root.join("splits.json"), &splits)?;

    let table = manifest::stats(&rows, websites, cfg.max_label);
    manifest::write_stats(create(&root.join("stats.csv"))?, &table.servers)?;
    manifest::write_distribution(create(&root.join("distribution.csv"))?, &table.distribution)?;
    write_json(&root.join("dedup_report.json"), &dedup_file)?;
    Ok(summary)
}

/// Reads a manifest and summarizes it per server.
pub fn stats_from_manifest(
    manifest_path: &Path,
    websites: Option<&Path>,
    max_label: u32,
) -> Result<ManifestStats, PipelineError> {
    let rows = manifest::read_manifest(File::open(manifest_path).map_err(io_err(manifest_path))?)?;
    let websites = match websites {
        Some(p) => manifest::read_websites(File::open(p).map_err(io_err(p))?)?,
        None => BTreeMap::new(),
    };
    Ok(manifest::stats(&rows, &websites, max_label))
}
