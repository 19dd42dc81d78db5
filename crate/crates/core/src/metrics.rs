//! Ordinal evaluation metrics and the composite training loss.
//!
//! The composite loss mixes three per-sample terms:
//!
//! * focused loss `w(y)·(1 − p_y)^γ·(−ln p_y)` on softmax probabilities,
//! * distance loss `Σ_i p_i·|i − y|`, the expected class distance,
//! * ordinal loss, binary cross-entropy over K−1 cumulative thresholds,
//!
//! as `α·FL + (1 − α)·(β·ORL + (1 − β)·DBL)`. Batch values are arithmetic
//! means. Gradients are analytic: FL and DBL with respect to the pre-softmax
//! logits, ORL with respect to the raw threshold scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no samples")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: u32 },
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("threshold targets are not a cumulative encoding")]
    NonCumulativeTargets,
    #[error("class counts are all zero")]
    AllZeroCounts,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// Paired true and predicted class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalVectors {
    y_true: Vec<u32>,
    y_pred: Vec<u32>,
    classes: u32,
}

impl EvalVectors {
    pub fn new(
        y_true: Vec<u32>,
        y_pred: Vec<u32>,
        classes: u32,
    ) -> Result<EvalVectors, MetricError> {
        if y_true.len() != y_pred.len() {
            return Err(MetricError::LengthMismatch {
                left: y_true.len(),
                right: y_pred.len(),
            });
        }
        if y_true.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        if let Some(&label) = y_true.iter().chain(&y_pred).find(|&&l| l >= classes) {
            return Err(MetricError::LabelOutOfRange { label, classes });
        }
        Ok(EvalVectors {
            y_true,
            y_pred,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }
}

/// Fraction of predictions within `k` classes of the truth.
pub fn cap(ev: &EvalVectors, k: u32) -> f64 {
    let hits = ev
        .y_true
        .iter()
        .zip(&ev.y_pred)
        .filter(|(t, p)| t.abs_diff(**p) <= k)
        .count();
    hits as f64 / ev.len() as f64
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities: non-negative, summing to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<ProbVector, MetricError> {
        if p.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(MetricError::InvalidProbabilities(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricError::InvalidProbabilities(format!("sum is {sum}")));
        }
        Ok(ProbVector(p))
    }

    pub fn from_logits(logits: &[f64]) -> ProbVector {
        ProbVector(softmax(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// Ordinal threshold scores with their cumulative targets
/// (`targets[k]` set iff the true class is at least `k + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdLogits {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ThresholdLogits {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<ThresholdLogits, MetricError> {
        if scores.len() != targets.len() {
            return Err(MetricError::LengthMismatch {
                left: scores.len(),
                right: targets.len(),
            });
        }
        if targets.windows(2).any(|w| !w[0] && w[1]) {
            return Err(MetricError::NonCumulativeTargets);
        }
        Ok(ThresholdLogits { scores, targets })
    }

    /// Scores paired with the cumulative encoding of `label` over `classes`.
    pub fn for_label(scores: Vec<f64>, label: u32) -> Result<ThresholdLogits, MetricError> {
        let classes = scores.len() as u32 + 1;
        if label >= classes {
            return Err(MetricError::LabelOutOfRange { label, classes });
        }
        let targets = cumulative_targets(label, classes);
        ThresholdLogits::new(scores, targets)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }
}

/// K−1 binary targets: entry k is set iff `label ≥ k + 1`.
pub fn cumulative_targets(label: u32, classes: u32) -> Vec<bool> {
    (0..classes.saturating_sub(1)).map(|k| label > k).collect()
}

/// Resolved loss parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub weights: Vec<f64>,
}

impl LossConfig {
    /// Default mixing (α = β = 0.5, γ = 2) with unit class weights.
    pub fn uniform(classes: usize) -> LossConfig {
        LossConfig {
            alpha: 0.5,
            beta: 0.5,
            gamma: 2.0,
            weights: vec![1.0; classes],
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha) || !unit.contains(&self.beta) {
            return Err(MetricError::InvalidConfig(format!(
                "alpha {} and beta {} must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(MetricError::InvalidConfig(format!("gamma {}", self.gamma)));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(MetricError::InvalidConfig(
                "weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Class weights as written in a config file: `"auto"` or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSetting {
    Keyword(String),
    Explicit(Vec<f64>),
}

/// The `[loss]` section of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub weights: WeightSetting,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: 0.5,
            beta: 0.5,
            gamma: 2.0,
            weights: WeightSetting::Keyword("auto".into()),
        }
    }
}

impl LossSettings {
    /// `class_counts` feeds `"auto"` weights; without counts they are uniform.
    pub fn resolve(
        &self,
        classes: usize,
        class_counts: Option<&[u64]>,
    ) -> Result<LossConfig, MetricError> {
        let weights = match &self.weights {
            WeightSetting::Keyword(k) if k == "auto" => match class_counts {
                Some(counts) => inverse_frequency_weights(counts)?,
                None => vec![1.0; classes],
            },
            WeightSetting::Keyword(k) if k == "uniform" => vec![1.0; classes],
            WeightSetting::Keyword(k) => {
                return Err(MetricError::InvalidConfig(format!("unknown weights {k:?}")))
            }
            WeightSetting::Explicit(w) => w.clone(),
        };
        if weights.len() != classes {
            return Err(MetricError::LengthMismatch {
                left: weights.len(),
                right: classes,
            });
        }
        let cfg = LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_label(y: u32, classes: usize) -> Result<usize, MetricError> {
    let y = y as usize;
    if y >= classes {
        return Err(MetricError::LabelOutOfRange {
            label: y as u32,
            classes: classes as u32,
        });
    }
    Ok(y)
}

/// Per-sample focused loss `w(y)·(1 − p_y)^γ·(−ln max(p_y, floor))`.
pub fn focused_loss(p: &ProbVector, y: u32, cfg: &LossConfig) -> Result<f64, MetricError> {
    let y = check_label(y, p.classes())?;
    let weight = *cfg.weights.get(y).ok_or(MetricError::LengthMismatch {
        left: cfg.weights.len(),
        right: p.classes(),
    })?;
    let py = p.0[y];
    Ok(weight * (1.0 - py).max(0.0).powf(cfg.gamma) * -py.max(PROB_FLOOR).ln())
}

/// Per-sample distance loss `Σ_i p_i·|i − y|`.
pub fn distance_loss(p: &ProbVector, y: u32) -> Result<f64, MetricError> {
    let y = check_label(y, p.classes())?;
    Ok(p.0
        .iter()
        .enumerate()
        .map(|(i, pi)| pi * i.abs_diff(y) as f64)
        .sum())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample ordinal loss: Σ_k BCE-with-logits(t_k, target_k).
pub fn ordinal_loss(tl: &ThresholdLogits) -> f64 {
    tl.scores
        .iter()
        .zip(&tl.targets)
        .map(|(&t, &target)| if target { softplus(-t) } else { softplus(t) })
        .sum()
}

pub fn composite_loss(fl: f64, dbl: f64, orl: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * fl + (1.0 - cfg.alpha) * (cfg.beta * orl + (1.0 - cfg.beta) * dbl)
}

/// Back-propagates `∂L/∂p` through softmax: `g_j = p_j·(d_j − Σ_i p_i d_i)`.
fn softmax_backward(p: &[f64], dl_dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dl_dp).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(dl_dp)
        .map(|(pj, dj)| pj * (dj - dot))
        .collect()
}

/// ∂FL/∂z for pre-softmax logits `z`.
pub fn focused_loss_grad(
    logits: &[f64],
    y: u32,
    cfg: &LossConfig,
) -> Result<Vec<f64>, MetricError> {
    let y = check_label(y, logits.len())?;
    let p = softmax(logits);
    let py = p[y];
    let w = cfg.weights[y];
    let gamma = cfg.gamma;
    let q = 1.0 - py;
    let mut dl_dp = vec![0.0; p.len()];
    dl_dp[y] = if q <= 0.0 {
        0.0
    } else if py < PROB_FLOOR {
        // log term is constant below the floor
        w * -gamma * q.powf(gamma - 1.0) * -PROB_FLOOR.ln()
    } else {
        w * (gamma * q.powf(gamma - 1.0) * py.ln() - q.powf(gamma) / py)
    };
    Ok(softmax_backward(&p, &dl_dp))
}

/// ∂DBL/∂z_j = p_j·(|j − y| − DBL).
pub fn distance_loss_grad(logits: &[f64], y: u32) -> Result<Vec<f64>, MetricError> {
    let y = check_label(y, logits.len())?;
    let p = softmax(logits);
    let dist: Vec<f64> = (0..p.len()).map(|i| i.abs_diff(y) as f64).collect();
    Ok(softmax_backward(&p, &dist))
}

/// ∂ORL/∂t_k = σ(t_k) − target_k.
pub fn ordinal_loss_grad(tl: &ThresholdLogits) -> Vec<f64> {
    tl.scores
        .iter()
        .zip(&tl.targets)
        .map(|(&t, &target)| sigmoid(t) - if target { 1.0 } else { 0.0 })
        .collect()
}

fn mean<I: ExactSizeIterator<Item = Result<f64, MetricError>>>(
    values: I,
) -> Result<f64, MetricError> {
    let n = values.len();
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    let mut sum = 0.0;
    for v in values {
        sum += v?;
    }
    Ok(sum / n as f64)
}

fn pair_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn batch_focused_loss(
    p: &[ProbVector],
    y: &[u32],
    cfg: &LossConfig,
) -> Result<f64, MetricError> {
    pair_len(p.len(), y.len())?;
    mean(p.iter().zip(y).map(|(p, &y)| focused_loss(p, y, cfg)))
}

pub fn batch_distance_loss(p: &[ProbVector], y: &[u32]) -> Result<f64, MetricError> {
    pair_len(p.len(), y.len())?;
    mean(p.iter().zip(y).map(|(p, &y)| distance_loss(p, y)))
}

pub fn batch_ordinal_loss(tl: &[ThresholdLogits]) -> Result<f64, MetricError> {
    mean(tl.iter().map(|t| Ok(ordinal_loss(t))))
}

/// Inverse-frequency class weights rescaled to mean 1 over present classes.
/// Absent classes take the largest present weight.
pub fn inverse_frequency_weights(class_counts: &[u64]) -> Result<Vec<f64>, MetricError> {
    let total: u64 = class_counts.iter().sum();
    if total == 0 {
        return Err(MetricError::AllZeroCounts);
    }
    let present = class_counts.iter().filter(|&&c| c > 0).count() as f64;
    let raw: Vec<Option<f64>> = class_counts
        .iter()
        .map(|&c| (c > 0).then(|| total as f64 / (present * c as f64)))
        .collect();
    let mean = raw.iter().flatten().sum::<f64>() / present;
    let max = raw.iter().flatten().copied().fold(f64::MIN, f64::max) / mean;
    Ok(raw
        .into_iter()
        .map(|w| w.map_or(max, |w| w / mean))
        .collect())
}

/// Summed (true, predicted) responses per trace and the share of traces
/// whose sums differ by at most `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTraceReport {
    pub tolerance: u64,
    pub accuracy: f64,
    pub points: Vec<[u64; 2]>,
}

/// Windows must not overlap, or responses are counted more than once.
pub fn per_trace_eval(
    traces: &[(Vec<u32>, Vec<u32>)],
    tolerance: u64,
) -> Result<PerTraceReport, MetricError> {
    if traces.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut points = Vec::with_capacity(traces.len());
    for (labels, preds) in traces {
        pair_len(labels.len(), preds.len())?;
        let t: u64 = labels.iter().map(|&x| u64::from(x)).sum();
        let p: u64 = preds.iter().map(|&x| u64::from(x)).sum();
        points.push([t, p]);
    }
    let hits = points
        .iter()
        .filter(|[t, p]| t.abs_diff(*p) <= tolerance)
        .count();
    Ok(PerTraceReport {
        tolerance,
        accuracy: hits as f64 / points.len() as f64,
        points,
    })
}

/// `{cap: {k: value}, per_trace: {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cap: BTreeMap<String, f64>,
    pub per_trace: PerTraceReport,
}
