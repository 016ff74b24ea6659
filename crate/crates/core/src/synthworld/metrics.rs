use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::{Error, Result};

pub const PRECISION_THRESHOLD_PX: f64 = 20.0;

/// Slack on the success thresholds, so a box that equals the ground truth up
/// to round-off still counts at threshold 1.
pub const IOU_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: Vec<f64>,
    /// Mean over the 21 thresholds `k / 20` of the share of frames with
    /// IoU at or above the threshold.
    pub auc: f64,
    /// Share of frames whose center error is within 20 px.
    pub precision: f64,
    /// Number of maximal runs of frames with zero overlap.
    pub failures: usize,
    pub mean_iou: f64,
}

pub fn success_thresholds() -> [f64; 21] {
    std::array::from_fn(|k| k as f64 / 20.0)
}

pub fn evaluate(pred: &[BBox], gt: &[BBox]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty sequence".into()));
    }
    let n = gt.len() as f64;
    let iou: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let thresholds = success_thresholds();
    let auc = thresholds
        .iter()
        .map(|th| iou.iter().filter(|v| **v >= *th - IOU_SLACK).count() as f64 / n)
        .sum::<f64>()
        / thresholds.len() as f64;
    let precision = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.center_distance(g) <= PRECISION_THRESHOLD_PX)
        .count() as f64
        / n;
    let mut failures = 0;
    let mut in_run = false;
    for v in &iou {
        let zero = *v == 0.0;
        if zero && !in_run {
            failures += 1;
        }
        in_run = zero;
    }
    let mean_iou = iou.iter().sum::<f64>() / n;
    Ok(Metrics {
        iou,
        auc,
        precision,
        failures,
        mean_iou,
    })
}
