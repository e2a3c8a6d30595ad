//! Greedy detection matching, all-point interpolated average precision at a
//! fixed IoU threshold, and per-class AP / mAP tables.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationSet, UNKNOWN_CATEGORY};
use crate::error::MetricsError;
use crate::geometry::{iou, BBox};

/// Default IoU threshold for AP50.
pub const AP50: f64 = 0.5;

/// Sorts detection indices by descending score; equal scores keep their input
/// order, so callers list detections by ascending annotation id.
fn ranking(dets: &[(BBox, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    order
}

/// Greedy matching. Detections are visited in descending score order; each
/// takes the still-unmatched ground truth with the highest IoU at or above
/// `iou_thresh` (lower index wins ties). Returns `(det, gt)` pairs in visit
/// order.
pub fn match_detections(
    gts: &[BBox],
    dets: &[(BBox, f64)],
    iou_thresh: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    ranking(dets)
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&dets[d].0, gt);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d, best.map(|(g, _)| g))
        })
        .collect()
}

/// Area under the upper precision envelope for a ranked list of
/// `(score, is_true_positive)` against `n_gt` ground-truth instances.
///
/// Precision/recall points are taken at each distinct score, so tied scores
/// enter together and the result depends on the ranking only.
pub fn envelope_area(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scored[order[i]].0;
        while i < order.len() && scored[order[i]].0 == s {
            n += 1;
            if scored[order[i]].1 {
                tp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / n as f64));
    }
    // suffix maximum of precision
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

fn known_category_ids(set: &AnnotationSet) -> BTreeSet<u32> {
    set.known_categories().map(|c| c.id).collect()
}

/// Marks each detection of `category` as true or false positive.
fn score_category(
    gt: &AnnotationSet,
    pred: &AnnotationSet,
    category: u32,
    iou_thresh: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut gts: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    let mut n_gt = 0;
    for a in gt.annotations.iter().filter(|a| a.category_id == category) {
        gts.entry(a.image_id).or_default().push(a.bbox);
        n_gt += 1;
    }
    let mut dets: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
    for a in pred.annotations.iter().filter(|a| a.category_id == category) {
        dets.entry(a.image_id).or_default().push(a);
    }
    let mut scored = Vec::new();
    for (image, mut list) in dets {
        list.sort_by_key(|a| a.id);
        let boxes: Vec<(BBox, f64)> = list.iter().map(|a| (a.bbox, a.score.unwrap_or(1.0))).collect();
        let empty = Vec::new();
        let g = gts.get(&image).unwrap_or(&empty);
        for (d, m) in match_detections(g, &boxes, iou_thresh) {
            scored.push((boxes[d].1, m.is_some()));
        }
    }
    (scored, n_gt)
}

/// AP of one known category. Zero when the category has no ground truth.
/// Detections without a score rank as 1.0.
pub fn average_precision(
    gt: &AnnotationSet,
    pred: &AnnotationSet,
    category: u32,
    iou_thresh: f64,
) -> Result<f64, MetricsError> {
    if category == UNKNOWN_CATEGORY {
        return Err(MetricsError::NotKnown(category));
    }
    check_iou_thresh(iou_thresh)?;
    let (scored, n_gt) = score_category(gt, pred, category, iou_thresh);
    Ok(envelope_area(&scored, n_gt))
}

fn check_iou_thresh(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidIouThreshold(t))
    }
}

/// Per-class AP for classes present in the ground truth, and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub per_class: BTreeMap<u32, f64>,
    pub map: f64,
}

impl ApTable {
    pub fn from_per_class(per_class: BTreeMap<u32, f64>) -> Self {
        let map = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        Self { per_class, map }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("AP tables always serialize")
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        let t: ApTable = serde_json::from_str(s)?;
        Ok(t)
    }

    /// Plain-text report, one class per line.
    pub fn render(&self, names: &BTreeMap<u32, String>) -> String {
        let mut out = format!("{:<6} {:<24} {:>8}\n", "id", "category", "AP50");
        for (id, ap) in &self.per_class {
            let name = names.get(id).map(String::as_str).unwrap_or("?");
            out.push_str(&format!("{:<6} {:<24} {:>8.4}\n", id, name, ap));
        }
        out.push_str(&format!("{:<6} {:<24} {:>8.4}\n", "", "mAP", self.map));
        out
    }
}

/// Evaluates every known category that has ground truth. Predictions of the
/// unknown category are ignored.
pub fn evaluate(gt: &AnnotationSet, pred: &AnnotationSet, iou_thresh: f64) -> Result<ApTable, MetricsError> {
    check_iou_thresh(iou_thresh)?;
    let gt_known = known_category_ids(gt);
    let pred_known = known_category_ids(pred);
    if gt_known != pred_known {
        return Err(MetricsError::CategoryMismatch(format!(
            "ground truth {gt_known:?} vs predictions {pred_known:?}"
        )));
    }
    let present: BTreeSet<u32> = gt
        .annotations
        .iter()
        .map(|a| a.category_id)
        .filter(|&c| c != UNKNOWN_CATEGORY)
        .collect();
    let per_class = present
        .into_iter()
        .map(|c| {
            let (scored, n_gt) = score_category(gt, pred, c, iou_thresh);
            (c, envelope_area(&scored, n_gt))
        })
        .collect();
    Ok(ApTable::from_per_class(per_class))
}
