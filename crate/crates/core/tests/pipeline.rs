mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use quicpic_core::corpus::{write_corpus, CorpusPlan};
use quicpic_core::pipeline::{
    evaluate, manifest, read_predictions, run_pipeline, stats_from_manifest, EvaluateOptions,
    ManifestRow, RowStatus, SplitSetting,
};
use quicpic_core::{Direction, PipelineConfig, PipelineError, SplitManifest};

use common::{pkt, snapshot, write_trace};

const C2S: Direction = Direction::ClientToServer;
const S2C: Direction = Direction::ServerToClient;

fn config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        out: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn rows(out: &Path) -> Vec<ManifestRow> {
    manifest::read_manifest(fs::File::open(out.join("manifest.csv")).unwrap()).unwrap()
}

fn leftovers(parent: &Path) -> Vec<String> {
    fs::read_dir(parent)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".partial-"))
        .collect()
}

#[test]
fn empty_input_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir(&input).unwrap();
    let out = tmp.path().join("out");
    let summary = run_pipeline(&config(&out), &input).unwrap();
    assert_eq!(summary.traces, 0);
    assert!(rows(&out).is_empty());
    let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert_eq!(stats.trim(), "server_label,websites,traces,images");
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with(
        "sample_id,trace_id,window_index,window_start,label,admitted,digest,png_path"
    ));
    for f in ["splits.json", "dedup_report.json", "distribution.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn one_second_trace_yields_eleven_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    let packets: Vec<_> = (0..=100)
        .map(|k| {
            pkt(
                k * 10,
                1200 + (k as u32 % 7) * 20,
                if k % 3 == 0 { C2S } else { S2C },
            )
        })
        .collect();
    write_trace(&input, "srv", "t0", &packets, &[0.05, 0.31, 0.33, 0.999]);
    let out = tmp.path().join("out");
    let summary = run_pipeline(&config(&out), &input).unwrap();
    assert_eq!(summary.windows, 11);
    let rows = rows(&out);
    assert_eq!(rows.len(), 11);
    let labels: Vec<u32> = rows.iter().map(|r| r.label).collect();
    assert_eq!(labels, vec![1, 0, 0, 2, 0, 0, 0, 0, 0, 1, 0]);
    assert_eq!(rows[3].window_start, "0.300000000");
    assert_eq!(rows[0].sample_id, "srv/t0/0");
    let written = rows.iter().filter(|r| !r.png_path.is_empty()).count();
    assert!(written <= 11);
    for r in &rows {
        if r.status != RowStatus::Duplicate {
            assert!(out.join(&r.png_path).is_file());
        }
    }
}

fn two_server_fixture(input: &Path) {
    // server a: two traces; server b: one trace whose window holds 25 responses
    let busy: Vec<_> = (0..50).map(|k| pkt(k * 2, 1300, S2C)).collect();
    write_trace(input, "a", "t0", &busy, &[0.01]);
    let other: Vec<_> = (0..30)
        .map(|k| pkt(k * 3, 900 + k as u32, if k % 2 == 0 { C2S } else { S2C }))
        .collect();
    write_trace(input, "a", "t1", &other, &[0.02, 0.04]);
    let responses: Vec<f64> = (0..25).map(|k| 0.001 + k as f64 * 0.003).collect();
    write_trace(input, "b", "t0", &busy, &responses);
}

#[test]
fn stats_match_a_hand_count() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    two_server_fixture(&input);
    let out = tmp.path().join("out");
    let summary = run_pipeline(&config(&out), &input).unwrap();
    // every trace is under 0.1 s: one window each
    assert_eq!(summary.windows, 3);
    assert_eq!(summary.rejected, 1);
    let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert_eq!(
        stats,
        "server_label,websites,traces,images\na,NA,2,2\nb,NA,1,0\n"
    );

    let websites = tmp.path().join("websites.csv");
    fs::write(&websites, "server_label,websites\na,12\n").unwrap();
    let table = stats_from_manifest(&out.join("manifest.csv"), Some(&websites), 20).unwrap();
    assert_eq!(table.servers[0].websites, Some(12));
    assert_eq!(table.servers[1].websites, None);
    assert_eq!(table.distribution.above, 0);
    assert_eq!(table.distribution.counts[1], 1);
    assert_eq!(table.distribution.counts[2], 1);
}

#[test]
fn conservation() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_corpus(&input, &CorpusPlan::default()).unwrap();
    let out = tmp.path().join("out");
    let s = run_pipeline(&config(&out), &input).unwrap();
    assert_eq!(s.admitted + s.rejected + s.duplicates, s.windows);
    assert_eq!(rows(&out).len() as u64, s.windows);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("dedup_report.json")).unwrap()).unwrap();
    assert_eq!(report["input"], s.windows);
    assert_eq!(
        report["kept"].as_u64().unwrap() + report["dropped"].as_u64().unwrap(),
        s.windows
    );
    assert_eq!(s.train + s.test, s.admitted);
}

#[test]
fn no_dedup_keeps_every_window() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_corpus(&input, &CorpusPlan::default()).unwrap();
    let out = tmp.path().join("out");
    let cfg = PipelineConfig {
        dedup: false,
        ..config(&out)
    };
    let s = run_pipeline(&cfg, &input).unwrap();
    assert_eq!(s.duplicates, 0);
    assert_eq!(s.admitted + s.rejected, s.windows);
}

#[test]
fn runs_are_deterministic_and_the_seed_only_moves_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_corpus(&input, &CorpusPlan::default()).unwrap();
    let run = |name: &str, seed: u64, threads: usize| {
        let out = tmp.path().join(name);
        let cfg = PipelineConfig {
            seed,
            threads: Some(threads),
            ..config(&out)
        };
        run_pipeline(&cfg, &input).unwrap();
        snapshot(&out)
    };
    let a = run("a", 1, 1);
    let b = run("b", 1, 4);
    assert_eq!(a, b);
    let c = run("c", 2, 2);
    assert_ne!(a["splits.json"], c["splits.json"]);
    for (path, bytes) in &a {
        if path != "splits.json" {
            assert_eq!(Some(bytes), c.get(path), "{path}");
        }
    }
}

#[test]
fn failed_run_leaves_previous_output_intact() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    two_server_fixture(&input);
    let out = tmp.path().join("out");
    run_pipeline(&config(&out), &input).unwrap();
    let before = snapshot(&out);

    fs::write(input.join("a/broken.pcap"), b"not a capture").unwrap();
    fs::write(input.join("a/broken.events.jsonl"), b"").unwrap();
    let err = run_pipeline(&config(&out), &input).unwrap_err();
    assert_eq!(err.kind(), "malformed_header");
    assert!(err.path().unwrap().ends_with("broken.pcap"));
    assert_eq!(snapshot(&out), before);
    assert!(leftovers(tmp.path()).is_empty());

    let fresh = tmp.path().join("fresh");
    assert!(run_pipeline(&config(&fresh), &input).is_err());
    assert!(!fresh.exists());
    assert!(leftovers(tmp.path()).is_empty());
}

#[test]
fn missing_sidecar_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_trace(&input, "a", "t0", &[pkt(0, 1200, C2S)], &[]);
    fs::remove_file(input.join("a/t0.events.jsonl")).unwrap();
    let err = run_pipeline(&config(&tmp.path().join("out")), &input).unwrap_err();
    assert!(matches!(err, PipelineError::MissingSidecar(_)));
}

#[test]
fn leave_servers_out_run() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    let plan = CorpusPlan {
        servers: vec![("a".into(), 3), ("b".into(), 3), ("c".into(), 3)],
        ..CorpusPlan::default()
    };
    write_corpus(&input, &plan).unwrap();
    let out = tmp.path().join("out");
    let cfg = PipelineConfig {
        split: SplitSetting::LeaveServersOut,
        holdout: vec!["c".into()],
        ..config(&out)
    };
    run_pipeline(&cfg, &input).unwrap();
    let splits: SplitManifest =
        serde_json::from_slice(&fs::read(out.join("splits.json")).unwrap()).unwrap();
    assert!(!splits.test.is_empty());
    assert!(splits.test.iter().all(|s| s.starts_with("c/")));
    assert!(splits.train.iter().all(|s| !s.starts_with("c/")));
}

fn row(trace: &str, index: usize, label: u32) -> ManifestRow {
    ManifestRow {
        sample_id: format!("{trace}/{index}"),
        trace_id: trace.into(),
        window_index: index,
        window_start: String::new(),
        label,
        admitted: true,
        digest: String::new(),
        png_path: String::new(),
        server_label: trace.split('/').next().unwrap().into(),
        status: RowStatus::Admitted,
    }
}

#[test]
fn evaluate_off_by_one_half() {
    let rows: Vec<ManifestRow> = (0..10).map(|k| row("s/t", k, (k % 4) as u32)).collect();
    let preds: BTreeMap<String, u32> = rows
        .iter()
        .map(|r| {
            (
                r.sample_id.clone(),
                if r.window_index % 2 == 0 {
                    r.label
                } else {
                    r.label + 1
                },
            )
        })
        .collect();
    let report = evaluate(&preds, &rows, &EvaluateOptions::default()).unwrap();
    assert_eq!(report.cap["0"], 0.5);
    assert_eq!(report.cap["1"], 1.0);
    assert_eq!(report.cap["2"], 1.0);

    let exact: BTreeMap<String, u32> = rows
        .iter()
        .map(|r| (r.sample_id.clone(), r.label))
        .collect();
    let report = evaluate(&exact, &rows, &EvaluateOptions::default()).unwrap();
    assert!(report.cap.values().all(|&v| v == 1.0));
}

#[test]
fn evaluate_reproduces_the_per_trace_example() {
    // windows listed out of order; the sums do not care
    let labels = [1, 0, 2, 4, 1];
    let preds = [1, 0, 3, 4, 1];
    let rows: Vec<ManifestRow> = [3, 0, 4, 1, 2]
        .iter()
        .map(|&k| row("s/t", k, labels[k]))
        .collect();
    let p: BTreeMap<String, u32> = (0..5).map(|k| (format!("s/t/{k}"), preds[k])).collect();
    let report = evaluate(&p, &rows, &EvaluateOptions::default()).unwrap();
    assert_eq!(report.per_trace.points, vec![[8, 9]]);
    assert_eq!(report.per_trace.accuracy, 1.0);
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["per_trace"]["points"][0], serde_json::json!([8, 9]));
}

#[test]
fn evaluate_errors_and_scope() {
    let mut rows: Vec<ManifestRow> = (0..4).map(|k| row("s/t", k, 1)).collect();
    rows[3].status = RowStatus::Rejected;
    rows[3].label = 30;
    let mut preds: BTreeMap<String, u32> = (0..3).map(|k| (format!("s/t/{k}"), 1)).collect();
    // rejected rows are out of scope, so no prediction is needed for them
    assert!(evaluate(&preds, &rows, &EvaluateOptions::default()).is_ok());
    preds.remove("s/t/0");
    assert!(matches!(
        evaluate(&preds, &rows, &EvaluateOptions::default()),
        Err(PipelineError::MissingPrediction(id)) if id == "s/t/0"
    ));
    preds.insert("s/t/0".into(), 1);
    preds.insert("s/zzz/0".into(), 1);
    assert!(matches!(
        evaluate(&preds, &rows, &EvaluateOptions::default()),
        Err(PipelineError::UnknownSampleId(id)) if id == "s/zzz/0"
    ));
    preds.remove("s/zzz/0");
    let split = SplitManifest {
        mode: quicpic_core::labels::SplitKind::KnownServers8020,
        seed: 0,
        train: vec!["s/t/0".into(), "s/t/1".into()],
        test: vec!["s/t/2".into()],
        held_out_servers: vec![],
        flagged_servers: vec![],
    };
    preds.insert("s/t/0".into(), 9);
    let opts = EvaluateOptions {
        split: Some(split),
        ..EvaluateOptions::default()
    };
    assert_eq!(evaluate(&preds, &rows, &opts).unwrap().cap["0"], 1.0);
}

#[test]
fn predictions_from_csv_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("p.csv");
    fs::write(&csv, "sample_id,prediction\na/b/0,3\na/b/1,0\n").unwrap();
    let json = tmp.path().join("p.json");
    fs::write(&json, "{\"a/b/0\": 3, \"a/b/1\": 0}").unwrap();
    let a = read_predictions(&csv).unwrap();
    assert_eq!(a, read_predictions(&json).unwrap());
    assert_eq!(a["a/b/0"], 3);
    fs::write(&csv, "sample_id,prediction\na/b/0,x\n").unwrap();
    assert!(read_predictions(&csv).is_err());
}

#[test]
fn config_from_toml() {
    let cfg = PipelineConfig::from_toml(
        "window = 0.3\nresolution = 16\nnormalize = \"per-trace\"\nsplit = \"leave-servers-out\"\nholdout = [\"x\"]\n",
    )
    .unwrap();
    assert_eq!(cfg.window, 0.3);
    assert_eq!(cfg.window_spec().unwrap().time_bins(), 16);
    assert_eq!(cfg.split, SplitSetting::LeaveServersOut);
    assert!(PipelineConfig::from_toml("bogus = 1\n").is_err());
    let cfg = PipelineConfig::from_toml("split = \"known-servers-80-20\"\n").unwrap();
    assert_eq!(cfg.split, SplitSetting::KnownServers8020);
}
