//! Rectangle and point metrics for top-1 grasp detection, plus evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GraspExample, SplitMode};
use crate::geometry::{angle_distance, jaccard, GraspRect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("ground truth list is empty")]
    EmptyGroundTruth,
    #[error("point metric needs an explicit distance threshold; prior work does not disclose the values it used")]
    MissingPointThreshold,
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
    #[error("label lists differ in length ({0} vs {1}) or are empty")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub angle_threshold: f64,
    pub jaccard_threshold: f64,
    pub point_distance_threshold: Option<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { angle_threshold: 30.0, jaccard_threshold: 0.25, point_distance_threshold: None }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.angle_threshold > 0.0 && self.angle_threshold <= 90.0) {
            return Err(MetricError::InvalidConfig(format!("angle_threshold {} not in (0, 90]", self.angle_threshold)));
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold < 1.0) {
            return Err(MetricError::InvalidConfig(format!(
                "jaccard_threshold {} not in (0, 1)",
                self.jaccard_threshold
            )));
        }
        if let Some(t) = self.point_distance_threshold {
            if !(t > 0.0) {
                return Err(MetricError::InvalidConfig(format!("point_distance_threshold {t} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub example_id: String,
    /// `None` when no prediction was supplied for the example.
    pub predicted: Option<GraspRect>,
    pub best_gt_index: Option<usize>,
    pub best_jaccard: f64,
    pub best_angle_diff: f64,
    pub success: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing_prediction: bool,
}

/// A prediction counts when one ground truth passes both the angle test
/// (inclusive) and the Jaccard test (strict).
pub fn rectangle_metric(
    example_id: &str,
    pred: &GraspRect,
    ground_truths: &[GraspRect],
    cfg: &MetricConfig,
) -> Result<MatchRecord, MetricError> {
    if ground_truths.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let mut best_any: Option<(usize, f64, f64)> = None;
    let mut best_ok: Option<(usize, f64, f64)> = None;
    for (i, gt) in ground_truths.iter().enumerate() {
        let j = jaccard(pred, gt);
        let da = angle_distance(pred.theta, gt.theta);
        if best_any.is_none_or(|(_, bj, _)| j > bj) {
            best_any = Some((i, j, da));
        }
        if da <= cfg.angle_threshold && j > cfg.jaccard_threshold && best_ok.is_none_or(|(_, bj, _)| j > bj) {
            best_ok = Some((i, j, da));
        }
    }
    let success = best_ok.is_some();
    let (idx, j, da) = best_ok.or(best_any).expect("nonempty ground truth");
    Ok(MatchRecord {
        example_id: example_id.to_string(),
        predicted: Some(*pred),
        best_gt_index: Some(idx),
        best_jaccard: j,
        best_angle_diff: da,
        success,
        missing_prediction: false,
    })
}

/// True when the predicted center is closer than the threshold to some ground
/// truth center.
pub fn point_metric(pred: &GraspRect, ground_truths: &[GraspRect], cfg: &MetricConfig) -> Result<bool, MetricError> {
    let thr = cfg.point_distance_threshold.ok_or(MetricError::MissingPointThreshold)?;
    Ok(ground_truths.iter().any(|g| g.center().distance(pred.center()) < thr))
}

pub fn classification_accuracy<T: PartialEq>(predicted: &[T], actual: &[T]) -> Result<f64, MetricError> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(MetricError::LengthMismatch(predicted.len(), actual.len()));
    }
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub accuracy: f64,
    pub records: Vec<MatchRecord>,
}

/// Scores one held-out fold. Examples without a prediction count as failures
/// and are flagged in their record.
pub fn evaluate_fold(
    predictions: &HashMap<String, GraspRect>,
    examples: &[&GraspExample],
    cfg: &MetricConfig,
) -> Result<FoldResult, MetricError> {
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let rec = match predictions.get(&ex.example_id) {
            Some(p) => rectangle_metric(&ex.example_id, p, &ex.positive_grasps, cfg)?,
            None => MatchRecord {
                example_id: ex.example_id.clone(),
                predicted: None,
                best_gt_index: None,
                best_jaccard: 0.0,
                best_angle_diff: 90.0,
                success: false,
                missing_prediction: true,
            },
        };
        records.push(rec);
    }
    let accuracy = fraction(records.iter().filter(|r| r.success).count(), records.len());
    Ok(FoldResult { accuracy, records })
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_mode: SplitMode,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub per_category_accuracy: Option<BTreeMap<String, f64>>,
    pub records: Vec<MatchRecord>,
    /// Object classification accuracy per fold, for the combined head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_fold_accuracies: Option<Vec<f64>>,
    /// Folds whose training failed; their accuracy is recorded as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_folds: Vec<usize>,
}

impl EvalReport {
    /// Builds a report from per-fold results. `categories` maps example ids to
    /// category names; when given, detection accuracy is broken down by category.
    pub fn from_folds(
        split_mode: SplitMode,
        folds: Vec<FoldResult>,
        categories: Option<&HashMap<String, String>>,
    ) -> Self {
        let fold_accuracies: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let mean_accuracy = mean(&fold_accuracies);
        let records: Vec<MatchRecord> = folds.into_iter().flat_map(|f| f.records).collect();
        let per_category_accuracy = categories.map(|cats| {
            let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for r in &records {
                if let Some(c) = cats.get(&r.example_id) {
                    let e = tally.entry(c.clone()).or_default();
                    e.1 += 1;
                    if r.success {
                        e.0 += 1;
                    }
                }
            }
            tally.into_iter().map(|(k, (h, n))| (k, fraction(h, n))).collect()
        });
        EvalReport {
            split_mode,
            fold_accuracies,
            mean_accuracy,
            per_category_accuracy,
            records,
            classification_fold_accuracies: None,
            failed_folds: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// One row of the detection-accuracy table.
#[derive(Debug, Clone)]
pub struct TableRow<'a> {
    pub algorithm: String,
    pub image_wise: Option<&'a EvalReport>,
    pub object_wise: Option<&'a EvalReport>,
    pub time_per_image: Option<String>,
}

/// Markdown table: algorithm, image-wise accuracy, object-wise accuracy, time per image.
pub fn markdown_table(rows: &[TableRow<'_>]) -> String {
    let pct = |r: Option<&EvalReport>| r.map_or_else(|| "-".to_string(), |r| format!("{:.1}%", 100.0 * r.mean_accuracy));
    let mut s = String::new();
    s.push_str("| Algorithm | Image-wise split | Object-wise split | Time / image |\n");
    s.push_str("|---|---|---|---|\n");
    for row in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            row.algorithm,
            pct(row.image_wise),
            pct(row.object_wise),
            row.time_per_image.as_deref().unwrap_or("-")
        );
    }
    s
}
