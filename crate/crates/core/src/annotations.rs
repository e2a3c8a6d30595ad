//! Labeled sets, unlabeled sets, pseudo-labels and predictions share one JSON
//! shape: `images`, `categories`, `annotations`. Ground truth carries no
//! score; detections and pseudo-labels do. Category id 0 is reserved for
//! `"unknown"`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::AnnotationError;
use crate::geometry::BBox;

pub const UNKNOWN_CATEGORY: u32 = 0;
pub const UNKNOWN_NAME: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

impl Category {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
        }
    }

    pub fn unknown() -> Self {
        Self::new(UNKNOWN_CATEGORY, UNKNOWN_NAME)
    }

    pub fn is_known(&self) -> bool {
        self.id != UNKNOWN_CATEGORY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Annotation {
    pub fn is_ground_truth(&self) -> bool {
        self.score.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub categories: Vec<Category>,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(images: Vec<ImageInfo>, categories: Vec<Category>) -> Self {
        Self {
            images,
            categories,
            annotations: Vec::new(),
        }
    }

    /// Checks every structural invariant of the set.
    pub fn validate(&self) -> Result<(), AnnotationError> {
        let mut images = BTreeMap::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(AnnotationError::Schema(format!(
                    "image {} has zero dimension",
                    img.id
                )));
            }
            if images.insert(img.id, img).is_some() {
                return Err(AnnotationError::DuplicateId {
                    kind: "image",
                    id: img.id,
                });
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(AnnotationError::DuplicateId {
                    kind: "category",
                    id: c.id as u64,
                });
            }
            if c.id == UNKNOWN_CATEGORY && c.name != UNKNOWN_NAME {
                return Err(AnnotationError::Schema(format!(
                    "category id 0 is reserved for \"unknown\", found {:?}",
                    c.name
                )));
            }
        }
        for a in &self.annotations {
            let Some(img) = images.get(&a.image_id) else {
                return Err(AnnotationError::DanglingId {
                    annotation: a.id,
                    kind: "image",
                    id: a.image_id,
                });
            };
            if !cats.contains(&a.category_id) {
                return Err(AnnotationError::DanglingId {
                    annotation: a.id,
                    kind: "category",
                    id: a.category_id as u64,
                });
            }
            if !a.bbox.within(img.width as f64, img.height as f64) {
                return Err(AnnotationError::Schema(format!(
                    "annotation {} box {:?} outside image {} ({}x{})",
                    a.id,
                    a.bbox.to_array(),
                    img.id,
                    img.width,
                    img.height
                )));
            }
            if let Some(s) = a.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(AnnotationError::Schema(format!(
                        "annotation {} score {s} outside [0, 1]",
                        a.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, AnnotationError> {
        let set: AnnotationSet = serde_json::from_str(s).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => AnnotationError::Schema(e.to_string()),
            _ => AnnotationError::Syntax(e),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation sets always serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnnotationError> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|source| AnnotationError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn known_categories(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| c.is_known())
    }

    /// Annotations grouped by image id, preserving list order within a group.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut out: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push(a);
        }
        out
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.annotations.iter().map(|a| a.id).max().map_or(1, |m| m + 1)
    }

    /// Adds the reserved unknown category if it is not present yet.
    pub fn ensure_unknown_category(&mut self) {
        if !self.categories.iter().any(|c| c.id == UNKNOWN_CATEGORY) {
            self.categories.insert(0, Category::unknown());
        }
    }
}

pub fn parse_annotation_set(path: impl AsRef<Path>) -> Result<AnnotationSet, AnnotationError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    AnnotationSet::from_json_str(&text)
}

/// Per-class object counts over known categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: BTreeMap<u32, u64>,
    pub percentages: BTreeMap<u32, f64>,
    pub total: u64,
}

impl ClassStats {
    pub fn from_counts(counts: BTreeMap<u32, u64>) -> Self {
        let total: u64 = counts.values().sum();
        let percentages = counts
            .iter()
            .map(|(&c, &n)| {
                let p = if total == 0 {
                    0.0
                } else {
                    100.0 * n as f64 / total as f64
                };
                (c, p)
            })
            .collect();
        Self {
            counts,
            percentages,
            total,
        }
    }
}

/// Object counts per known category. Categories listed in the table but
/// without annotations appear with count 0; the unknown category is excluded.
pub fn class_frequencies(set: &AnnotationSet) -> ClassStats {
    let mut counts: BTreeMap<u32, u64> = set.known_categories().map(|c| (c.id, 0)).collect();
    for a in &set.annotations {
        if a.category_id != UNKNOWN_CATEGORY {
            *counts.entry(a.category_id).or_insert(0) += 1;
        }
    }
    ClassStats::from_counts(counts)
}

/// Keeps annotations with `score >= tau`. Every annotation must carry a score.
pub fn filter_by_confidence(set: &AnnotationSet, tau: f64) -> Result<AnnotationSet, AnnotationError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(AnnotationError::InvalidThreshold(tau));
    }
    let mut kept = Vec::with_capacity(set.annotations.len());
    for a in &set.annotations {
        let s = a.score.ok_or(AnnotationError::MissingScore(a.id))?;
        if s >= tau {
            kept.push(a.clone());
        }
    }
    Ok(AnnotationSet {
        images: set.images.clone(),
        categories: set.categories.clone(),
        annotations: kept,
    })
}

/// Union of two sets sharing a category table. Images with equal ids must be
/// identical. Annotation ids are reissued 1.. in order: all of `a`, then `b`.
pub fn merge_sets(a: &AnnotationSet, b: &AnnotationSet) -> Result<AnnotationSet, AnnotationError> {
    let ca: BTreeSet<_> = a.categories.iter().collect();
    let cb: BTreeSet<_> = b.categories.iter().collect();
    if ca != cb {
        return Err(AnnotationError::CategoryMismatch(format!(
            "{:?} vs {:?}",
            a.categories, b.categories
        )));
    }
    let mut images = a.images.clone();
    for img in &b.images {
        match a.images.iter().find(|i| i.id == img.id) {
            Some(existing) if existing != img => return Err(AnnotationError::ImageConflict(img.id)),
            Some(_) => {}
            None => images.push(img.clone()),
        }
    }
    let annotations = a
        .annotations
        .iter()
        .chain(&b.annotations)
        .enumerate()
        .map(|(i, ann)| Annotation {
            id: i as u64 + 1,
            ..ann.clone()
        })
        .collect();
    Ok(AnnotationSet {
        images,
        categories: a.categories.clone(),
        annotations,
    })
}

impl PartialOrd for Category {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Category {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.id, &self.name).cmp(&(other.id, &other.name))
    }
}
