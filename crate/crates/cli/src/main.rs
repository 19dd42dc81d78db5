//! `quicpic`: build traffic-image datasets from QUIC captures and score
//! predictions against them.
//!
//! Standard output carries machine-readable JSON (or CSV for `histogram`);
//! progress and warnings go to standard error. Failures print a one-line
//! JSON error record to standard error and exit with status 1.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use quicpic_core::corpus::{write_corpus, CorpusPlan};
use quicpic_core::ingest::parse_pcap;
use quicpic_core::labels::SplitManifest;
use quicpic_core::pipeline::{
    self, evaluate, read_predictions, run_pipeline, stats_from_manifest, EvaluateOptions,
    PipelineConfig, PipelineError, SplitSetting,
};
use quicpic_core::render::NormalizationMode;
use quicpic_core::window::{build_histogram, enumerate_windows};

#[derive(Parser)]
#[command(
    name = "quicpic",
    version,
    about = "QUIC captures to labeled traffic-image datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build images, manifest, splits and statistics from a capture directory.
    Run(RunArgs),
    /// Per-server counts and label distribution of a manifest.
    Stats {
        manifest: PathBuf,
        #[arg(long)]
        websites: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        max_label: u32,
    },
    /// Score predictions: CAP at each tolerance plus per-trace sums.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CAP tolerances.
        #[arg(long = "k", value_delimiter = ',', default_values_t = [0u32, 1, 2])]
        ks: Vec<u32>,
        /// Tolerance on per-trace response sums.
        #[arg(long, default_value_t = 3)]
        tolerance: u64,
        /// Score only the test side of this split.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        classes: u32,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a deterministic synthetic capture corpus in the input layout.
    Synth {
        root: PathBuf,
        /// Server labels (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = ["alpha".to_string(), "beta".to_string()])]
        servers: Vec<String>,
        /// Traces per server.
        #[arg(long, default_value_t = 6)]
        traces: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Dump one window's histogram of a capture as `i,j,channel,count` CSV.
    Histogram {
        pcap: PathBuf,
        #[arg(long, default_value_t = 0)]
        window_index: usize,
        #[command(flatten)]
        window: WindowArgs,
    },
}

#[derive(Args, Default)]
struct WindowArgs {
    /// Window length in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Image side (time bins = length bins).
    #[arg(long)]
    resolution: Option<usize>,
    /// Largest binned packet length in bytes.
    #[arg(long)]
    mtu: Option<u32>,
    /// Fraction shared by consecutive windows, in [0, 1).
    #[arg(long)]
    overlap: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeArg {
    PerWindow,
    PerTrace,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    #[value(name = "known-servers-80-20")]
    KnownServers8020,
    LeaveServersOut,
}

#[derive(Args)]
struct RunArgs {
    /// Root holding `<server>/<trace>.pcap` and `<trace>.events.jsonl`.
    input: PathBuf,
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, value_enum)]
    normalize: Option<NormalizeArg>,
    #[arg(long, overrides_with = "no_dedup")]
    dedup: bool,
    #[arg(long = "no-dedup")]
    no_dedup: bool,
    #[arg(long)]
    max_label: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Servers to hold out (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    holdout: Vec<String>,
    /// Hold out this many servers chosen by the seed.
    #[arg(long)]
    holdout_count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    websites: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

struct Failure {
    kind: &'static str,
    message: String,
    path: Option<PathBuf>,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Failure {
        Failure {
            kind: e.kind(),
            path: e.path().map(Path::to_path_buf),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn new(kind: &'static str, message: impl ToString, path: Option<&Path>) -> Failure {
        Failure {
            kind,
            message: message.to_string(),
            path: path.map(Path::to_path_buf),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new("io", e, Some(path)))
}

fn apply_window(cfg: &mut PipelineConfig, w: &WindowArgs) {
    if let Some(v) = w.window {
        cfg.window = v;
    }
    if let Some(v) = w.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = w.mtu {
        cfg.mtu = v;
    }
    if let Some(v) = w.overlap {
        cfg.overlap = v;
    }
}

fn run_config(args: &RunArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::from_toml(&read_text(path)?)
            .map_err(|e| Failure::new("config", e, Some(path)))?,
        None => PipelineConfig::default(),
    };
    apply_window(&mut cfg, &args.window);
    if let Some(n) = args.normalize {
        cfg.normalize = match n {
            NormalizeArg::PerWindow => NormalizationMode::PerWindow,
            NormalizeArg::PerTrace => NormalizationMode::PerTrace,
        };
    }
    if args.dedup {
        cfg.dedup = true;
    }
    if args.no_dedup {
        cfg.dedup = false;
    }
    if let Some(v) = args.max_label {
        cfg.max_label = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(s) = args.split {
        cfg.split = match s {
            SplitArg::KnownServers8020 => SplitSetting::KnownServers8020,
            SplitArg::LeaveServersOut => SplitSetting::LeaveServersOut,
        };
    }
    if !args.holdout.is_empty() {
        cfg.holdout = args.holdout.clone();
    }
    if args.holdout_count.is_some() {
        cfg.holdout_count = args.holdout_count;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.websites {
        cfg.websites = Some(v.clone());
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::new("io", e, None))?;
    writeln!(out).map_err(|e| Failure::new("io", e, None))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(args) => {
            let cfg = run_config(&args)?;
            let summary = run_pipeline(&cfg, &args.input)?;
            log::info!(
                "{} traces, {} windows, {} admitted, {} rejected, {} duplicates",
                summary.traces,
                summary.windows,
                summary.admitted,
                summary.rejected,
                summary.duplicates
            );
            print_json(&summary)
        }
        Command::Stats {
            manifest,
            websites,
            max_label,
        } => {
            let stats = stats_from_manifest(&manifest, websites.as_deref(), max_label)?;
            print_json(&json!({
                "servers": stats.servers,
                "distribution": {
                    "counts": stats.distribution.counts,
                    "above_max_label": stats.distribution.above,
                    "share_0_1_2": stats.distribution.low_share(),
                },
            }))
        }
        Command::Evaluate {
            predictions,
            manifest,
            ks,
            tolerance,
            splits,
            classes,
            out,
        } => {
            let preds = read_predictions(&predictions)?;
            let rows = pipeline::manifest::read_manifest(
                fs::File::open(&manifest).map_err(|e| Failure::new("io", e, Some(&manifest)))?,
            )?;
            let split = match &splits {
                Some(p) => Some(
                    serde_json::from_str::<SplitManifest>(&read_text(p)?)
                        .map_err(|e| Failure::new("malformed_input", e, Some(p)))?,
                ),
                None => None,
            };
            let opts = EvaluateOptions {
                ks,
                tolerance,
                classes,
                split,
            };
            let report = evaluate(&preds, &rows, &opts)?;
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report)
                    .map_err(|e| Failure::new("io", e, None))?;
                fs::write(&path, text + "\n").map_err(|e| Failure::new("io", e, Some(&path)))?;
            }
            print_json(&report)
        }
        Command::Synth {
            root,
            servers,
            traces,
            seed,
        } => {
            let plan = CorpusPlan {
                servers: servers.into_iter().map(|s| (s, traces)).collect(),
                seed,
                ..CorpusPlan::default()
            };
            let written =
                write_corpus(&root, &plan).map_err(|e| Failure::new("io", e, Some(&root)))?;
            let counts: Vec<_> = written
                .iter()
                .map(|(server, t)| json!({"server_label": server, "traces": t.len()}))
                .collect();
            print_json(&json!({"root": root.display().to_string(), "servers": counts}))
        }
        Command::Histogram {
            pcap,
            window_index,
            window,
        } => {
            let mut cfg = PipelineConfig::default();
            apply_window(&mut cfg, &window);
            let spec = cfg
                .window_spec()
                .map_err(|e| Failure::new("config", e, None))?;
            let bytes = fs::read(&pcap).map_err(|e| Failure::new("io", e, Some(&pcap)))?;
            let name = pcap
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("trace")
                .to_owned();
            let ingested = parse_pcap(&bytes, &name, "", &cfg.filter()).map_err(|e| {
                PipelineError::Ingest {
                    path: pcap.clone(),
                    source: e,
                }
            })?;
            let windows = enumerate_windows(ingested.trace.duration(), &spec);
            let w = *windows.get(window_index).ok_or_else(|| {
                Failure::new(
                    "config",
                    format!(
                        "window {window_index} out of range (trace has {})",
                        windows.len()
                    ),
                    Some(&pcap),
                )
            })?;
            let hist = build_histogram(&ingested.trace, w, &spec);
            hist.write_debug_csv(io::stdout().lock())
                .map_err(|e| Failure::new("io", e, None))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let record = json!({
                "error": f.kind,
                "message": f.message,
                "path": f.path.map(|p| p.display().to_string()),
            });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}
