//! Scoring predictions against a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use serde::Deserialize;

use super::manifest::{ManifestRow, RowStatus};
use super::{io_err, PipelineError};
use crate::labels::SplitManifest;
use crate::metrics::{cap, per_trace_eval, EvalReport, EvalVectors};

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    /// CAP tolerances.
    pub ks: Vec<u32>,
    /// Per-trace sum tolerance.
    pub tolerance: u64,
    pub classes: u32,
    /// Restrict scoring to this split's test set.
    pub split: Option<SplitManifest>,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            ks: vec![0, 1, 2],
            tolerance: 3,
            classes: crate::labels::MAX_LABEL + 1,
            split: None,
        }
    }
}

/// Sample id to predicted label, from CSV (`sample_id,prediction`) or, for
/// `.json` files, an object of the same mapping.
pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, u32>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        return serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| PipelineError::MalformedInput(format!("{}: {e}", path.display())));
    }
    #[derive(Deserialize)]
    struct Row {
        sample_id: String,
        prediction: u32,
    }
    let mut out = BTreeMap::new();
    for (n, row) in csv::Reader::from_reader(file)
        .deserialize::<Row>()
        .enumerate()
    {
        let row = row.map_err(|e| {
            PipelineError::MalformedInput(format!("{} row {}: {e}", path.display(), n + 1))
        })?;
        out.insert(row.sample_id, row.prediction);
    }
    Ok(out)
}

/// CAP at each tolerance over the admitted rows in scope, and per-trace sums
/// over the same rows in window order.
pub fn evaluate(
    predictions: &BTreeMap<String, u32>,
    rows: &[ManifestRow],
    opts: &EvaluateOptions,
) -> Result<EvalReport, PipelineError> {
    let known: BTreeSet<&str> = rows.iter().map(|r| r.sample_id.as_str()).collect();
    if let Some(unknown) = predictions.keys().find(|id| !known.contains(id.as_str())) {
        return Err(PipelineError::UnknownSampleId(unknown.clone()));
    }
    let test: Option<BTreeSet<&str>> = opts
        .split
        .as_ref()
        .map(|s| s.test.iter().map(String::as_str).collect());

    let mut scoped: Vec<&ManifestRow> = rows
        .iter()
        .filter(|r| r.status == RowStatus::Admitted)
        .filter(|r| {
            test.as_ref()
                .is_none_or(|t| t.contains(r.sample_id.as_str()))
        })
        .collect();
    scoped.sort_by(|a, b| (&a.trace_id, a.window_index).cmp(&(&b.trace_id, b.window_index)));

    let mut y_true = Vec::with_capacity(scoped.len());
    let mut y_pred = Vec::with_capacity(scoped.len());
    let mut per_trace: BTreeMap<&str, (Vec<u32>, Vec<u32>)> = BTreeMap::new();
    for row in &scoped {
        let pred = *predictions
            .get(&row.sample_id)
            .ok_or_else(|| PipelineError::MissingPrediction(row.sample_id.clone()))?;
        y_true.push(row.label);
        y_pred.push(pred);
        let entry = per_trace.entry(&row.trace_id).or_default();
        entry.0.push(row.label);
        entry.1.push(pred);
    }

    let ev = EvalVectors::new(y_true, y_pred, opts.classes)?;
    let cap_values = opts
        .ks
        .iter()
        .map(|&k| (k.to_string(), cap(&ev, k)))
        .collect();
    let traces: Vec<(Vec<u32>, Vec<u32>)> = per_trace.into_values().collect();
    Ok(EvalReport {
        cap: cap_values,
        per_trace: per_trace_eval(&traces, opts.tolerance)?,
    })
}
