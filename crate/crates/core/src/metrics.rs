//! Evaluation math: confusion-count scores, mask overlap, exact pairwise
//! ROC/AUC, and the surface boundary-error statistic.
//!
//! Degenerate-input conventions are part of the contract and pinned by
//! tests: empty-denominator precision/recall/F1 collapse to 0, the IOU of
//! two empty masks is 1 (an all-negative segmentation that should be
//! all-negative is perfect), and single-class AUC is an error rather than
//! a number.

use crate::error::{config_err, shape_err, Error, Result};
use crate::image::Mask2;
use crate::volume::VriSurface;

// ============================================================
// Confusion counts
// ============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask2, gt: &Mask2) -> Result<Self> {
        if !pred.same_shape(gt) {
            return Err(shape_err!(
                "mask shapes differ: {}x{} vs {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            ));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Precision, recall, and F1 with zero-denominator terms defined as 0.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (f64, f64, f64) {
    let tp = c.true_pos as f64;
    let precision = if c.true_pos + c.false_pos == 0 {
        0.0
    } else {
        tp / (tp + c.false_pos as f64)
    };
    let recall = if c.true_pos + c.false_neg == 0 {
        0.0
    } else {
        tp / (tp + c.false_neg as f64)
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

// ============================================================
// Mask overlap
// ============================================================

/// Intersection over union; two empty masks score 1.0.
pub fn iou(pred: &Mask2, gt: &Mask2) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(shape_err!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

// ============================================================
// ROC / AUC
// ============================================================

/// Exact Mann–Whitney AUC over all positive/negative pairs, ties counted
/// at one half. Needs at least one case of each class.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(config_err!("AUC scores must not be NaN"));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

// ============================================================
// Surface boundary error
// ============================================================

/// Mean and population std of the per-column absolute height difference,
/// optionally restricted to a set of B-scan indices.
pub fn boundary_error(
    pred: &VriSurface,
    truth: &VriSurface,
    restrict: Option<&[usize]>,
) -> Result<(f64, f64)> {
    if pred.nx() != truth.nx() || pred.ny() != truth.ny() {
        return Err(shape_err!(
            "surface shapes differ: {}x{} vs {}x{}",
            pred.nx(),
            pred.ny(),
            truth.nx(),
            truth.ny()
        ));
    }
    let rows: Vec<usize> = match restrict {
        Some(ys) => {
            for &y in ys {
                if y >= pred.ny() {
                    return Err(crate::error::bounds_err!(
                        "restricted B-scan {y} out of range (ny={})",
                        pred.ny()
                    ));
                }
            }
            ys.to_vec()
        }
        None => (0..pred.ny()).collect(),
    };
    if rows.is_empty() {
        return Err(Error::UndefinedMetric(
            "boundary error over an empty B-scan set".into(),
        ));
    }
    let mut diffs = Vec::with_capacity(rows.len() * pred.nx());
    for &y in &rows {
        for x in 0..pred.nx() {
            diffs.push((pred.get(x, y) as f64 - truth.get(x, y) as f64).abs());
        }
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

// ============================================================
// Tests
// ============================================================
