//! Response-count labels, admission, train/test splits and minority-class
//! augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::render::TrafficImage;
use crate::time::Nanos;

/// Largest label admitted to training and evaluation sets.
pub const MAX_LABEL: u32 = 20;

/// Labels eligible for noise augmentation.
pub const AUGMENT_LABELS: std::ops::RangeInclusive<u32> = 10..=20;

/// σ of the pixel noise: 1% of the 8-bit range.
pub const AUGMENT_SIGMA: f64 = 2.55;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("event line {line}: {message}")]
    InvalidEvent { line: usize, message: String },
    #[error("server {server} has {traces} traces; at least {min} are needed for an 80:20 split")]
    TooFewTraces {
        server: String,
        traces: usize,
        min: usize,
    },
    #[error("cannot hold out {requested} of {servers} servers")]
    InvalidHoldoutCount { requested: usize, servers: usize },
    #[error("held-out server {0} has no samples")]
    UnknownHoldoutServer(String),
    #[error("label {0} is outside the augmentation range 10..=20")]
    LabelOutOfAugmentationRange(u32),
    #[error("malformed sample id {0:?}")]
    SampleId(String),
}

/// One line of a sidecar event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEvent {
    pub trace_id: String,
    /// Response start, seconds since trace start.
    pub t: f64,
}

/// Reads JSON Lines events; blank lines are skipped.
pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<ResponseEvent>, LabelError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let invalid = |message: String| LabelError::InvalidEvent {
            line: n + 1,
            message,
        };
        let line = line.map_err(|e| invalid(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: ResponseEvent =
            serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        if !(event.t.is_finite() && event.t >= 0.0) {
            return Err(invalid(format!(
                "timestamp {} is not a non-negative number",
                event.t
            )));
        }
        out.push(event);
    }
    Ok(out)
}

/// Sorted start times of the events belonging to `trace_id`.
pub fn event_times<'a, I>(events: I, trace_id: &str) -> Vec<Nanos>
where
    I: IntoIterator<Item = &'a ResponseEvent>,
{
    let mut times: Vec<Nanos> = events
        .into_iter()
        .filter(|e| e.trace_id == trace_id)
        .filter_map(|e| Nanos::from_secs_f64(e.t))
        .collect();
    times.sort_unstable();
    times
}

/// Number of responses starting in `[window_start, window_start + window)`.
/// `events` must be sorted.
pub fn label_window(events: &[Nanos], window_start: Nanos, window: Nanos) -> u32 {
    let end = window_start + window;
    let lo = events.partition_point(|&t| t < window_start);
    let hi = events.partition_point(|&t| t < end);
    (hi - lo) as u32
}

/// `trace_id/window_index`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub trace_id: String,
    pub window_index: usize,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.trace_id, self.window_index)
    }
}

impl FromStr for SampleId {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<SampleId, LabelError> {
        let (trace, index) = s
            .rsplit_once('/')
            .ok_or_else(|| LabelError::SampleId(s.to_owned()))?;
        let window_index = index
            .parse()
            .map_err(|_| LabelError::SampleId(s.to_owned()))?;
        if trace.is_empty() {
            return Err(LabelError::SampleId(s.to_owned()));
        }
        Ok(SampleId {
            trace_id: trace.to_owned(),
            window_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub image: TrafficImage,
    pub label: u32,
    pub server_label: String,
}

impl LabeledSample {
    pub fn id(&self) -> SampleId {
        SampleId {
            trace_id: self.image.trace_id.clone(),
            window_index: self.image.window.index,
        }
    }

    pub fn sample_ref(&self) -> SampleRef {
        SampleRef {
            id: self.id(),
            server_label: self.server_label.clone(),
        }
    }
}

/// Whether a sample may enter training or evaluation. Rejected samples stay
/// in the raw archive.
pub fn admit(sample: &LabeledSample, max_label: u32) -> bool {
    sample.label <= max_label
}

/// What a split needs to know about a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub id: SampleId,
    pub server_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Holdout {
    /// These servers form the test set.
    Servers(Vec<String>),
    /// Pick this many servers with the seeded generator.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitMode {
    KnownServers8020,
    LeaveServersOut(Holdout),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    #[serde(rename = "known-servers-80-20")]
    KnownServers8020,
    LeaveServersOut,
}

/// What to do with a server below the minimum trace count in 80:20 mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TooFewPolicy {
    #[default]
    Fail,
    /// Leave the server out of both sides and list it in the manifest.
    Flag,
}

/// Minimum traces per server for an 80:20 split.
pub const MIN_TRACES_PER_SERVER: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub mode: SplitKind,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub held_out_servers: Vec<String>,
    #[serde(default)]
    pub flagged_servers: Vec<String>,
}

fn server_seed(seed: u64, server: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(server.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Splits samples by trace. Whole traces move together; in 80:20 mode each
/// server's sorted trace list is shuffled by a generator seeded from
/// (`seed`, server) and cut at ⌊0.8·n⌋. Output lists keep input order.
pub fn split(
    samples: &[SampleRef],
    mode: &SplitMode,
    seed: u64,
    policy: TooFewPolicy,
) -> Result<SplitManifest, LabelError> {
    let mut by_server: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in samples {
        by_server
            .entry(&s.server_label)
            .or_default()
            .insert(&s.id.trace_id);
    }

    let mut manifest = SplitManifest {
        mode: SplitKind::KnownServers8020,
        seed,
        train: Vec::new(),
        test: Vec::new(),
        held_out_servers: Vec::new(),
        flagged_servers: Vec::new(),
    };

    match mode {
        SplitMode::KnownServers8020 => {
            let mut train_traces: BTreeSet<&str> = BTreeSet::new();
            let mut test_traces: BTreeSet<&str> = BTreeSet::new();
            for (server, traces) in &by_server {
                if traces.len() < MIN_TRACES_PER_SERVER {
                    match policy {
                        TooFewPolicy::Fail => {
                            return Err(LabelError::TooFewTraces {
                                server: server.to_string(),
                                traces: traces.len(),
                                min: MIN_TRACES_PER_SERVER,
                            })
                        }
                        TooFewPolicy::Flag => {
                            manifest.flagged_servers.push(server.to_string());
                            continue;
                        }
                    }
                }
                let mut order: Vec<&str> = traces.iter().copied().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(server_seed(seed, server));
                order.shuffle(&mut rng);
                let cut = traces.len() * 4 / 5;
                train_traces.extend(&order[..cut]);
                test_traces.extend(&order[cut..]);
            }
            for s in samples {
                let id = s.id.to_string();
                if train_traces.contains(s.id.trace_id.as_str()) {
                    manifest.train.push(id);
                } else if test_traces.contains(s.id.trace_id.as_str()) {
                    manifest.test.push(id);
                }
            }
        }
        SplitMode::LeaveServersOut(holdout) => {
            manifest.mode = SplitKind::LeaveServersOut;
            let servers: Vec<&str> = by_server.keys().copied().collect();
            let held: BTreeSet<String> = match holdout {
                Holdout::Servers(names) => {
                    let names: BTreeSet<String> = names.iter().cloned().collect();
                    if names.is_empty() || names.len() >= servers.len() {
                        return Err(LabelError::InvalidHoldoutCount {
                            requested: names.len(),
                            servers: servers.len(),
                        });
                    }
                    if let Some(missing) =
                        names.iter().find(|n| !by_server.contains_key(n.as_str()))
                    {
                        return Err(LabelError::UnknownHoldoutServer(missing.clone()));
                    }
                    names
                }
                Holdout::Count(x) => {
                    if *x == 0 || *x >= servers.len() {
                        return Err(LabelError::InvalidHoldoutCount {
                            requested: *x,
                            servers: servers.len(),
                        });
                    }
                    let mut order = servers.clone();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    order[..*x].iter().map(|s| s.to_string()).collect()
                }
            };
            for s in samples {
                let id = s.id.to_string();
                if held.contains(&s.server_label) {
                    manifest.test.push(id);
                } else {
                    manifest.train.push(id);
                }
            }
            manifest.held_out_servers = held.into_iter().collect();
        }
    }
    Ok(manifest)
}

/// Gaussian pixel noise for minority classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    pub sigma: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter {
            sigma: AUGMENT_SIGMA,
        }
    }
}

impl Augmenter {
    /// Adds independent N(0, σ²) noise to every nonzero red or green value,
    /// rounding and clamping to 0..=255. Zeros and the blue channel are left
    /// alone; the label is unchanged.
    pub fn augment(&self, sample: &LabeledSample, seed: u64) -> Result<LabeledSample, LabelError> {
        if !AUGMENT_LABELS.contains(&sample.label) {
            return Err(LabelError::LabelOutOfAugmentationRange(sample.label));
        }
        let mut out = sample.clone();
        if self.sigma == 0.0 {
            return Ok(out);
        }
        let noise = Normal::new(0.0, self.sigma).expect("sigma is finite and non-negative");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for px in out.image.pixels_mut() {
            for v in px.iter_mut().take(2) {
                if *v != 0 {
                    let shifted = f64::from(*v) + noise.sample(&mut rng);
                    *v = shifted.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Ok(out)
    }
}

pub fn augment_minority(sample: &LabeledSample, seed: u64) -> Result<LabeledSample, LabelError> {
    Augmenter::default().augment(sample, seed)
}

/// Label histogram over 0..=max_label, plus the count of larger labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    pub counts: Vec<u64>,
    pub above: u64,
}

impl ResponseDistribution {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of labels 0, 1 and 2 among the counted labels; 0 when empty.
    pub fn low_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let low: u64 = self.counts.iter().take(3).sum();
        low as f64 / total as f64
    }
}

pub fn response_distribution<I>(labels: I, max_label: u32) -> ResponseDistribution
where
    I: IntoIterator<Item = u32>,
{
    let mut dist = ResponseDistribution {
        counts: vec![0; max_label as usize + 1],
        above: 0,
    };
    for label in labels {
        match dist.counts.get_mut(label as usize) {
            Some(c) => *c += 1,
            None => dist.above += 1,
        }
    }
    dist
}
