//! Confusion-matrix metrics, ROC/AUC, operating points and run summaries.
//!
//! Threshold convention everywhere: a record is predicted abnormal iff
//! `p_abnormal >= threshold`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ProbabilityRecord;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub false_pos: u64,
}

impl ConfusionCounts {
    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    pub fn negatives(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

/// Accuracy, sensitivity (TPR) and specificity (1 - FPR) from a confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::validation(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(())
}

pub fn confusion_at_threshold(records: &[ProbabilityRecord], threshold: f64) -> Result<ConfusionCounts> {
    if records.is_empty() {
        return Err(Error::validation("confusion counts need at least one record"));
    }
    check_threshold(threshold)?;
    Ok(confusion_from_scores(
        records.iter().map(|r| (r.p_abnormal, r.true_label)),
        threshold,
    ))
}

pub(crate) fn confusion_from_scores(
    pairs: impl IntoIterator<Item = (f64, u8)>,
    threshold: f64,
) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, label) in pairs {
        match (label == 1, p >= threshold) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_pos += 1,
        }
    }
    c
}

pub fn classification_metrics(counts: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let pos = counts.positives();
    let neg = counts.negatives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("sensitivity"));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric("specificity"));
    }
    Ok(ClassificationMetrics {
        accuracy: (counts.true_pos + counts.true_neg) as f64 / counts.total() as f64,
        sensitivity: counts.true_pos as f64 / pos as f64,
        specificity: counts.true_neg as f64 / neg as f64,
    })
}

/// One ROC vertex: the confusion state reached at `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub true_pos: u64,
    pub false_pos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered by threshold descending; the first point is `(0, 0)` at an
    /// infinite threshold, the last is `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub positives: u64,
    pub negatives: u64,
}

impl RocCurve {
    pub fn sensitivity_at(&self, i: usize) -> f64 {
        self.points[i].true_pos as f64 / self.positives as f64
    }

    pub fn specificity_at(&self, i: usize) -> f64 {
        (self.negatives - self.points[i].false_pos) as f64 / self.negatives as f64
    }

    /// Writes `threshold,fpr,tpr` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads the `threshold,fpr,tpr` triples back (counts are not stored).
    pub fn read_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        let mut rows = Vec::new();
        for row in reader.deserialize::<(f64, f64, f64)>() {
            rows.push(row?);
        }
        Ok(rows)
    }
}

fn validate_scores(pairs: &[(f64, u8)]) -> Result<(u64, u64)> {
    let mut pos = 0;
    let mut neg = 0;
    for &(p, label) in pairs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!("probability {p} outside [0, 1]")));
        }
        match label {
            1 => pos += 1,
            0 => neg += 1,
            other => return Err(Error::validation(format!("label {other} is not 0 or 1"))),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::validation(format!(
            "ROC analysis needs both classes; got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// ROC curve over every distinct score plus the `(0, 0)` anchor, and its
/// trapezoidal area. Tied scores form a single diagonal step, which gives
/// ties half credit and makes the area equal the Mann-Whitney statistic.
pub fn roc_auc(records: &[ProbabilityRecord]) -> Result<(RocCurve, f64)> {
    let pairs: Vec<(f64, u8)> = records.iter().map(|r| (r.p_abnormal, r.true_label)).collect();
    roc_from_scores(pairs)
}

pub(crate) fn roc_from_scores(mut pairs: Vec<(f64, u8)>) -> Result<(RocCurve, f64)> {
    let (pos, neg) = validate_scores(&pairs)?;
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        true_pos: 0,
        false_pos: 0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area times pos*neg, accumulated exactly.
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            true_pos: tp,
            false_pos: fp,
        });
    }
    let auc = doubled_area as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok((
        RocCurve {
            points,
            positives: pos,
            negatives: neg,
        },
        auc,
    ))
}

/// AUC without materializing the curve; used by the subset sweep.
pub(crate) fn auc_from_scores(pairs: &mut [(f64, u8)], pos: u64, neg: u64) -> f64 {
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut doubled_area: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
    }
    doubled_area as f64 / (2 * pos as u128 * neg as u128) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatingTarget {
    Sensitivity(f64),
    Specificity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Picks the threshold that meets `target` and maximizes the other metric.
/// Among equally good points the higher threshold wins.
pub fn operating_point(curve: &RocCurve, target: OperatingTarget) -> Result<OperatingPoint> {
    let (value, by_sensitivity) = match target {
        OperatingTarget::Sensitivity(v) => (v, true),
        OperatingTarget::Specificity(v) => (v, false),
    };
    if !(value > 0.0 && value < 1.0) {
        return Err(Error::validation(format!("operating target {value} outside (0, 1)")));
    }
    if curve.points.is_empty() || curve.positives == 0 || curve.negatives == 0 {
        return Err(Error::validation("operating point needs a non-empty curve over both classes"));
    }
    let mut best: Option<(usize, f64)> = None;
    let mut best_constrained = f64::NEG_INFINITY;
    for i in 0..curve.points.len() {
        let (sens, spec) = (curve.sensitivity_at(i), curve.specificity_at(i));
        let (constrained, other) = if by_sensitivity { (sens, spec) } else { (spec, sens) };
        best_constrained = best_constrained.max(constrained);
        if constrained >= value && best.is_none_or(|(_, b)| other > b) {
            best = Some((i, other));
        }
    }
    let (i, _) = best.ok_or(Error::Infeasible {
        target: value,
        best: best_constrained,
    })?;
    Ok(OperatingPoint {
        threshold: curve.points[i].threshold,
        sensitivity: curve.sensitivity_at(i),
        specificity: curve.specificity_at(i),
    })
}

/// Full evaluation of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn evaluate(records: &[ProbabilityRecord], threshold: f64) -> Result<MetricsReport> {
    let counts = confusion_at_threshold(records, threshold)?;
    let m = classification_metrics(&counts)?;
    let (_, auc) = roc_auc(records)?;
    Ok(MetricsReport {
        accuracy: m.accuracy,
        auc,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        threshold,
        counts,
        metadata: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Arithmetic mean and sample standard deviation (n - 1); `sd = 0` for n = 1.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("mean of an empty list"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, sd })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean * 100.0, self.sd * 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub accuracy: MeanSd,
    pub auc: MeanSd,
    pub sensitivity: MeanSd,
    pub specificity: MeanSd,
}

pub fn summarize_runs(reports: &[MetricsReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::validation("cannot summarize zero runs"));
    }
    let col = |f: fn(&MetricsReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(RunSummary {
        runs: reports.len(),
        accuracy: col(|r| r.accuracy)?,
        auc: col(|r| r.auc)?,
        sensitivity: col(|r| r.sensitivity)?,
        specificity: col(|r| r.specificity)?,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}
