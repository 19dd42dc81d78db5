//! Turns QUIC packet captures into labeled RGB traffic images.
//!
//! Stages, each usable on its own:
//!
//! * [`ingest`]: classic PCAP to per-packet (time, length, direction) records
//!   of one QUIC conversation.
//! * [`window`]: sliding time windows and M×N×2 (time, length, direction)
//!   packet-count histograms.
//! * [`render`]: min-max normalized RGB images (red server-to-client, green
//!   client-to-server), content digests, dedup and PNG output.
//! * [`labels`]: response-count labels from event sidecars, admission,
//!   trace-level splits and noise augmentation.
//! * [`metrics`]: CAP±k, the focused / distance / ordinal loss terms, their
//!   composite and analytic gradients, per-trace sum evaluation.
//! * [`pipeline`]: the directory-to-dataset driver behind the CLI.

pub mod corpus;
pub mod ingest;
pub mod labels;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod time;
pub mod window;

pub use ingest::{
    classify_quic, parse_pcap, resolve_direction, Direction, FlowEndpoints, PacketRecord,
    QuicFilterConfig, TraceMeta,
};
pub use labels::{LabeledSample, ResponseEvent, SampleId, SplitManifest};
pub use metrics::{EvalVectors, LossConfig, ProbVector, ThresholdLogits};
pub use pipeline::{PipelineConfig, PipelineError};
pub use render::{NormalizationMode, TrafficImage};
pub use time::Nanos;
pub use window::{Window, WindowHistogram, WindowSpec};
