//! Per-class average precision, mean AP, confusion matrices and latency
//! measurement.
//!
//! AP here is the non-interpolated form: rank items by score (descending,
//! ties kept in input order) and average the precision at the rank of every
//! positive. mAP is the unweighted mean over classes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetItem, DatasetStore};
use crate::error::{Error, Result};
use crate::graph::{argmax, forward, Model};
use crate::imaging::{to_input_tensor, ImageRGB8};
use crate::tensor::Tensor;

/// Mean of precision@k over the ranks k of the positives.
pub fn average_precision(scores: &[f32], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep their input order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_pos as f64)
}

/// Unweighted mean of per-class APs.
pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("mAP of zero classes".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `counts[true][predicted]` for `num_classes` classes.
pub fn confusion_matrix(
    truths: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if truths.len() != predictions.len() {
        return Err(Error::shape(format!(
            "{} truths but {} predictions",
            truths.len(),
            predictions.len()
        )));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truths.iter().zip(predictions) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) out of range for {num_classes} classes"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Class labels in index order.
    pub labels: Vec<String>,
    pub per_class_ap: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub counts: BTreeMap<String, usize>,
    pub accuracy: f64,
}

impl EvalReport {
    /// Builds a report from per-item class scores (`N×K`) and true indices.
    pub fn from_scores(labels: &[String], scores: &[Vec<f32>], truths: &[usize]) -> Result<Self> {
        let k = labels.len();
        if scores.len() != truths.len() {
            return Err(Error::shape(format!(
                "{} score rows but {} truths",
                scores.len(),
                truths.len()
            )));
        }
        if let Some(row) = scores.iter().find(|r| r.len() != k) {
            return Err(Error::shape(format!("score row of length {} for {k} classes", row.len())));
        }
        let missing: Vec<&str> = (0..k)
            .filter(|c| !truths.contains(c))
            .map(|c| labels[c].as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingClasses(missing.join(", ")));
        }
        let mut aps = Vec::with_capacity(k);
        for c in 0..k {
            let column: Vec<f32> = scores.iter().map(|r| r[c]).collect();
            let positives: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            aps.push(average_precision(&column, &positives)?);
        }
        let predicted: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let confusion = confusion_matrix(truths, &predicted, k)?;
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(EvalReport {
            labels: labels.to_vec(),
            per_class_ap: labels.iter().cloned().zip(aps.iter().copied()).collect(),
            map: mean_average_precision(&aps)?,
            counts: labels
                .iter()
                .cloned()
                .zip(confusion.iter().map(|row| row.iter().sum()))
                .collect(),
            confusion,
            accuracy: correct as f64 / truths.len() as f64,
        })
    }

    pub fn ap(&self, label: &str) -> Option<f64> {
        self.per_class_ap.get(label).copied()
    }

    /// Plain-text table: one row per class plus an `Overall` row.
    pub fn to_table(&self, model_name: &str) -> String {
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .chain(["Overall".len(), "Average precision".len()])
            .max()
            .unwrap_or(0);
        let col = model_name.len().max(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} | {:>col$}", "Average precision", model_name);
        let _ = writeln!(out, "{}-+-{}", "-".repeat(width), "-".repeat(col));
        for label in &self.labels {
            let _ = writeln!(
                out,
                "{:<width$} | {:>col$.3}",
                capitalize(label),
                self.per_class_ap[label]
            );
        }
        let _ = writeln!(out, "{}-+-{}", "=".repeat(width), "=".repeat(col));
        let _ = writeln!(out, "{:<width$} | {:>col$.3}", "Overall", self.map);
        out
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Anything that maps an image to one score per class.
pub trait Classifier: Sync {
    fn labels(&self) -> &[String];
    fn class_scores(&self, image: &ImageRGB8) -> Result<Vec<f32>>;
}

impl Classifier for Model {
    fn labels(&self) -> &[String] {
        Model::labels(self)
    }

    fn class_scores(&self, image: &ImageRGB8) -> Result<Vec<f32>> {
        let input = to_input_tensor(image, self.graph().input_spec())?;
        Ok(forward(self, &input)?.confidences)
    }
}

/// Scores every item (no augmentation) and reports AP, mAP and confusion.
/// Items are processed in id order so the report does not depend on input
/// order.
pub fn evaluate<C: Classifier + ?Sized>(
    classifier: &C,
    store: &DatasetStore,
    items: &[DatasetItem],
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let mut sorted: Vec<&DatasetItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let scores: Vec<Vec<f32>> = sorted
        .par_iter()
        .map(|item| {
            let run = || classifier.class_scores(&store.read_image(item)?);
            run().map_err(|e| Error::Item {
                id: item.id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let truths: Vec<usize> = sorted.iter().map(|i| i.label.index()).collect();
    EvalReport::from_scores(classifier.labels(), &scores, &truths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the samples.
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::InvalidArgument("latency stats need at least one run".into()));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len();
        let rank = |p: f64| s[((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            runs: n,
            mean_ms: s.iter().sum::<f64>() / n as f64,
            p50_ms: rank(50.0),
            p95_ms: rank(95.0),
            min_ms: s[0],
            max_ms: s[n - 1],
        })
    }

    pub fn is_ordered(&self) -> bool {
        self.runs >= 1
            && self.min_ms <= self.p50_ms
            && self.p50_ms <= self.p95_ms
            && self.p95_ms <= self.max_ms
            && self.min_ms <= self.mean_ms
            && self.mean_ms <= self.max_ms
    }
}

fn time_forward(model: &Model, input: &Tensor) -> Result<f64> {
    let start = Instant::now();
    forward(model, input)?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Wall-clock of `forward` over `runs` timed calls after `warmup` discarded
/// ones.
pub fn latency_benchmark(model: &Model, input: &Tensor, runs: usize, warmup: usize) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    for _ in 0..warmup {
        forward(model, input)?;
    }
    let samples = (0..runs)
        .map(|_| time_forward(model, input))
        .collect::<Result<Vec<_>>>()?;
    LatencyStats::from_samples(&samples)
}

/// Benchmarks two models with interleaved runs, so slow drift in machine
/// load affects both equally.
pub fn compare_latency(
    a: &Model,
    b: &Model,
    input: &Tensor,
    runs: usize,
    warmup: usize,
) -> Result<(LatencyStats, LatencyStats)> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    for _ in 0..warmup {
        forward(a, input)?;
        forward(b, input)?;
    }
    let mut sa = Vec::with_capacity(runs);
    let mut sb = Vec::with_capacity(runs);
    for i in 0..runs {
        if i % 2 == 0 {
            sa.push(time_forward(a, input)?);
            sb.push(time_forward(b, input)?);
        } else {
            sb.push(time_forward(b, input)?);
            sa.push(time_forward(a, input)?);
        }
    }
    Ok((LatencyStats::from_samples(&sa)?, LatencyStats::from_samples(&sb)?))
}
