//! Fusion of known-class pseudo-labels with detections tagged "unknown" by an
//! open-set detector.
//!
//! An unknown detection that overlaps a known detection (IoU strictly above
//! the gate) is kept only if its score reaches the class threshold
//! `T_i = clamp(exp(gamma * (AP_i - 1)), 0, 1)` of the overlapping class, where
//! `AP_i` is the supervised teacher's AP for that class. Well-learned classes
//! therefore demand more evidence before a region is also marked unknown. An
//! unknown detection with no such overlap is kept when its score reaches the
//! base threshold. Fusion only appends: known annotations pass through
//! untouched, so a region may end up carrying both labels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationSet, Category, UNKNOWN_CATEGORY};
use crate::error::FusionError;
use crate::geometry::iou;
use crate::metrics::ApTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub gamma: f64,
    pub iou_gate: f64,
    pub base_unknown_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            iou_gate: 0.7,
            base_unknown_threshold: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(FusionError::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

pub fn dynamic_threshold(ap: f64, gamma: f64) -> Result<f64, FusionError> {
    if !(0.0..=1.0).contains(&ap) {
        return Err(FusionError::ApOutOfRange(ap));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(FusionError::InvalidGamma(gamma));
    }
    Ok((gamma * (ap - 1.0)).exp().clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable(pub BTreeMap<u32, f64>);

impl ThresholdTable {
    pub fn get(&self, category: u32) -> Option<f64> {
        self.0.get(&category).copied()
    }
}

/// Thresholds for every known category in `categories`.
pub fn build_threshold_table(
    aps: &ApTable,
    categories: &[Category],
    cfg: &FusionConfig,
) -> Result<ThresholdTable, FusionError> {
    cfg.validate()?;
    categories
        .iter()
        .filter(|c| c.is_known())
        .map(|c| {
            let ap = *aps.per_class.get(&c.id).ok_or(FusionError::MissingCategory(c.id))?;
            Ok((c.id, dynamic_threshold(ap, cfg.gamma)?))
        })
        .collect::<Result<_, _>>()
        .map(ThresholdTable)
}

/// Why an unknown detection was kept or dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnknownDecision {
    /// Overlaps known detection `known_id` of `category` above the gate.
    Overlap {
        known_id: u64,
        category: u32,
        threshold: f64,
        kept: bool,
    },
    Isolated {
        threshold: f64,
        kept: bool,
    },
}

impl UnknownDecision {
    pub fn kept(&self) -> bool {
        match *self {
            UnknownDecision::Overlap { kept, .. } | UnknownDecision::Isolated { kept, .. } => kept,
        }
    }
}

fn known_table(set: &AnnotationSet) -> BTreeSet<&Category> {
    set.known_categories().collect()
}

fn check_inputs(known: &AnnotationSet, unknown: &AnnotationSet) -> Result<(), FusionError> {
    if known_table(known) != known_table(unknown) {
        return Err(FusionError::CategoryMismatch(format!(
            "{:?} vs {:?}",
            known.categories, unknown.categories
        )));
    }
    for a in &known.annotations {
        if a.category_id == UNKNOWN_CATEGORY {
            return Err(FusionError::UnknownInKnownSet(a.id));
        }
        a.score.ok_or(FusionError::MissingScore(a.id))?;
    }
    let images: BTreeSet<u64> = known.images.iter().map(|i| i.id).collect();
    for a in &unknown.annotations {
        if a.category_id != UNKNOWN_CATEGORY {
            return Err(FusionError::NonUnknownCategory {
                annotation: a.id,
                category: a.category_id,
            });
        }
        a.score.ok_or(FusionError::MissingScore(a.id))?;
        if !images.contains(&a.image_id) {
            return Err(FusionError::ImageMismatch {
                annotation: a.id,
                image: a.image_id,
            });
        }
    }
    Ok(())
}

/// Decides a single unknown detection against the known detections of its
/// image.
pub fn decide(
    u: &Annotation,
    known_on_image: &[&Annotation],
    thresholds: &ThresholdTable,
    cfg: &FusionConfig,
) -> Result<UnknownDecision, FusionError> {
    let score = u.score.ok_or(FusionError::MissingScore(u.id))?;
    // max IoU above the gate; ties go to the lower category id, then lower id
    let mut best: Option<(&Annotation, f64)> = None;
    for k in known_on_image {
        let v = iou(&u.bbox, &k.bbox);
        if v <= cfg.iou_gate {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, bv)) => {
                v > bv || (v == bv && (k.category_id, k.id) < (b.category_id, b.id))
            }
        };
        if better {
            best = Some((k, v));
        }
    }
    Ok(match best {
        Some((k, _)) => {
            let t = thresholds
                .get(k.category_id)
                .ok_or(FusionError::MissingCategory(k.category_id))?;
            UnknownDecision::Overlap {
                known_id: k.id,
                category: k.category_id,
                threshold: t,
                kept: score >= t,
            }
        }
        None => UnknownDecision::Isolated {
            threshold: cfg.base_unknown_threshold,
            kept: score >= cfg.base_unknown_threshold,
        },
    })
}

/// Appends retained unknown detections to the known set. Appended detections
/// get fresh ids after the largest known id, in input order.
pub fn fuse(
    known: &AnnotationSet,
    unknown: &AnnotationSet,
    thresholds: &ThresholdTable,
    cfg: &FusionConfig,
) -> Result<AnnotationSet, FusionError> {
    cfg.validate()?;
    check_inputs(known, unknown)?;
    let by_image = known.by_image();
    let mut out = known.clone();
    out.ensure_unknown_category();
    let mut next_id = known.next_annotation_id();
    for u in &unknown.annotations {
        let neighbours = by_image.get(&u.image_id).map(Vec::as_slice).unwrap_or(&[]);
        if decide(u, neighbours, thresholds, cfg)?.kept() {
            out.annotations.push(Annotation {
                id: next_id,
                ..u.clone()
            });
            next_id += 1;
        }
    }
    Ok(out)
}

/// Known-class annotations that share a region with a retained unknown
/// annotation (IoU above the gate). Training treats these as conflicting.
pub fn conflicting_known_ids(fused: &AnnotationSet, iou_gate: f64) -> BTreeSet<u64> {
    let mut out = BTreeSet::new();
    for list in fused.by_image().values() {
        for u in list.iter().filter(|a| a.category_id == UNKNOWN_CATEGORY) {
            for k in list.iter().filter(|a| a.category_id != UNKNOWN_CATEGORY) {
                if iou(&u.bbox, &k.bbox) > iou_gate {
                    out.insert(k.id);
                }
            }
        }
    }
    out
}
