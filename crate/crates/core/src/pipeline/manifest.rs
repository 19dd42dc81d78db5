//! The per-window manifest and the tables derived from it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::labels::{response_distribution, ResponseDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Admitted,
    /// Label above the admission limit; kept in the raw archive.
    Rejected,
    /// Same pixels and label as an earlier row.
    Duplicate,
}

/// One window of one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub trace_id: String,
    pub window_index: usize,
    /// Seconds, fixed-point with nanosecond digits.
    pub window_start: String,
    pub label: u32,
    pub admitted: bool,
    pub digest: String,
    /// Relative to the output root; empty for duplicates.
    pub png_path: String,
    pub server_label: String,
    pub status: RowStatus,
}

pub fn write_manifest<W: Write>(out: W, rows: &[ManifestRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "sample_id",
            "trace_id",
            "window_index",
            "window_start",
            "label",
            "admitted",
            "digest",
            "png_path",
            "server_label",
            "status",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ManifestRow>, PipelineError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .enumerate()
        .map(|(n, r)| {
            r.map_err(|e| PipelineError::MalformedManifest(format!("row {}: {e}", n + 1)))
        })
        .collect()
}

/// One row of the per-server summary table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStatsRow {
    pub server_label: String,
    /// `None` when no websites metadata was supplied.
    pub websites: Option<u64>,
    pub traces: u64,
    pub images: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub servers: Vec<ServerStatsRow>,
    /// Labels of admitted images.
    pub distribution: ResponseDistribution,
}

/// Per-server trace and admitted-image counts, sorted by server.
pub fn stats(
    rows: &[ManifestRow],
    websites: &BTreeMap<String, u64>,
    max_label: u32,
) -> ManifestStats {
    let mut traces: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut images: BTreeMap<&str, u64> = BTreeMap::new();
    for row in rows {
        traces
            .entry(&row.server_label)
            .or_default()
            .insert(&row.trace_id);
        let count = images.entry(&row.server_label).or_default();
        if row.status == RowStatus::Admitted {
            *count += 1;
        }
    }
    let servers = traces
        .into_iter()
        .map(|(server, t)| ServerStatsRow {
            server_label: server.to_owned(),
            websites: websites.get(server).copied(),
            traces: t.len() as u64,
            images: images[server],
        })
        .collect();
    let distribution = response_distribution(
        rows.iter()
            .filter(|r| r.status == RowStatus::Admitted)
            .map(|r| r.label),
        max_label,
    );
    ManifestStats {
        servers,
        distribution,
    }
}

/// `server_label,websites,traces,images`; unknown website counts print `NA`.
pub fn write_stats<W: Write>(out: W, rows: &[ServerStatsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["server_label", "websites", "traces", "images"])?;
    for r in rows {
        let websites = r
            .websites
            .map_or_else(|| "NA".to_owned(), |n| n.to_string());
        w.write_record([
            r.server_label.as_str(),
            &websites,
            &r.traces.to_string(),
            &r.images.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_distribution<W: Write>(out: W, dist: &ResponseDistribution) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "count"])?;
    for (label, count) in dist.counts.iter().enumerate() {
        w.write_record([label.to_string(), count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `server_label,websites` pairs (header required).
pub fn read_websites<R: Read>(input: R) -> Result<BTreeMap<String, u64>, PipelineError> {
    #[derive(Deserialize)]
    struct Row {
        server_label: String,
        websites: u64,
    }
    csv::Reader::from_reader(input)
        .deserialize::<Row>()
        .map(|r| {
            r.map(|r| (r.server_label, r.websites))
                .map_err(|e| PipelineError::MalformedInput(format!("websites file: {e}")))
        })
        .collect()
}
