//! Prototype detector for the shape world.
//!
//! Proposals are connected components of pixels brighter than the estimated
//! background. Each proposal is described by a direction-normalised colour
//! contrast, log aspect ratio and fill ratio, then scored against per-class
//! centroids with a class-frequency bias:
//! `softmax((bias_c - d_c) / temperature)`, `bias_c = prior_strength * ln(K * prior_c)`.

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationSet, UNKNOWN_CATEGORY};
use crate::ema::ParamVector;
use crate::error::WorldError;
use crate::geometry::BBox;
use crate::raster::RasterImage;
use crate::world::ImageStore;

pub const FEATURE_DIM: usize = 5;
pub type Features = [f64; FEATURE_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub temperature: f64,
    pub prior_strength: f64,
    /// Open-set radius as a multiple of the largest within-class distance.
    pub open_set_margin: f64,
    /// Summed positive contrast over the three channels for a foreground pixel.
    pub fg_threshold: f64,
    pub min_area: usize,
    pub aspect_scale: f64,
    pub fill_scale: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            prior_strength: 0.05,
            open_set_margin: 1.0,
            fg_threshold: 60.0,
            min_area: 12,
            aspect_scale: 0.5,
            fill_scale: 1.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), WorldError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.temperature) && pos(self.open_set_margin) && pos(self.fg_threshold)) {
            return Err(WorldError::InvalidModel(
                "temperature, open-set margin and foreground threshold must be positive".into(),
            ));
        }
        if !(self.prior_strength >= 0.0 && self.aspect_scale >= 0.0 && self.fill_scale >= 0.0) {
            return Err(WorldError::InvalidModel("feature and prior scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub params: DetectorParams,
    pub classes: Vec<u32>,
    pub centroids: Vec<Features>,
    /// Class probabilities; sum to one.
    pub priors: Vec<f64>,
    /// Accumulated (weighted) training evidence per class.
    pub evidence: Vec<f64>,
    /// Open-set distance radius.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub bbox: BBox,
    pub category_id: u32,
    pub confidence: f64,
    /// Softmax over `classes`, in model order.
    pub scores: Vec<f64>,
    /// Distance to the nearest centroid.
    pub distance: f64,
    pub features: Features,
}

/// Per-channel median of the image.
pub fn background_estimate(img: &RasterImage) -> [f64; 3] {
    let mut hist = [[0u32; 256]; 3];
    for p in img.pixels() {
        for c in 0..3 {
            hist[c][p[c] as usize] += 1;
        }
    }
    let half = img.pixels().len() as u32 / 2;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let mut acc = 0;
        for (v, &n) in hist[c].iter().enumerate() {
            acc += n;
            if acc > half {
                out[c] = v as f64;
                break;
            }
        }
    }
    out
}

fn contrast(p: [u8; 3], bg: &[f64; 3]) -> f64 {
    (0..3).map(|c| (p[c] as f64 - bg[c]).max(0.0)).sum()
}

fn pixel_span(b: &BBox, img: &RasterImage) -> (u32, u32, u32, u32) {
    let x0 = b.x.round().max(0.0) as u32;
    let y0 = b.y.round().max(0.0) as u32;
    let x1 = (b.right().round() as u32).min(img.width());
    let y1 = (b.bottom().round() as u32).min(img.height());
    (x0, y0, x1.max(x0), y1.max(y0))
}

/// Features of the foreground pixels inside `b`, or `None` if there are none.
pub fn box_features(img: &RasterImage, bg: &[f64; 3], b: &BBox, p: &DetectorParams) -> Option<Features> {
    let (x0, y0, x1, y1) = pixel_span(b, img);
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let px = img.get(x, y);
            if contrast(px, bg) > p.fg_threshold {
                for c in 0..3 {
                    sum[c] += px[c] as f64 - bg[c];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    Some([
        sum[0] / norm,
        sum[1] / norm,
        sum[2] / norm,
        (w / h).ln() * p.aspect_scale,
        n as f64 / (w * h) * p.fill_scale,
    ])
}

/// Bounding boxes of 4-connected foreground components with at least
/// `min_area` pixels, in raster-scan order of their first pixel.
pub fn propose(img: &RasterImage, bg: &[f64; 3], p: &DetectorParams) -> Vec<BBox> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let fg: Vec<bool> = img.pixels().iter().map(|&px| contrast(px, bg) > p.fg_threshold).collect();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if area >= p.min_area {
            out.push(BBox {
                x: x0 as f64,
                y: y0 as f64,
                w: (x1 - x0) as f64,
                h: (y1 - y0) as f64,
            });
        }
    }
    out
}

pub fn distance(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Features of every known-class annotation in `set`.
pub fn annotation_features(
    set: &AnnotationSet,
    images: &ImageStore,
    p: &DetectorParams,
) -> Result<Vec<(u32, Features)>, WorldError> {
    let mut out = Vec::new();
    for (image_id, anns) in set.by_image() {
        let anns: Vec<&Annotation> = anns.into_iter().filter(|a| a.category_id != UNKNOWN_CATEGORY).collect();
        if anns.is_empty() {
            continue;
        }
        let img = images.get(&image_id).ok_or(WorldError::MissingImage(image_id))?;
        let bg = background_estimate(img);
        for a in anns {
            if let Some(f) = box_features(img, &bg, &a.bbox, p) {
                out.push((a.category_id, f));
            }
        }
    }
    Ok(out)
}

impl DetectorModel {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn index_of(&self, category: u32) -> Option<usize> {
        self.classes.iter().position(|&c| c == category)
    }

    /// Class bias in distance units.
    pub fn bias(&self) -> Vec<f64> {
        let k = self.classes.len() as f64;
        self.priors
            .iter()
            .map(|&p| self.params.prior_strength * (k * p.max(1e-12)).ln())
            .collect()
    }

    pub fn distances(&self, f: &Features) -> Vec<f64> {
        self.centroids.iter().map(|c| distance(f, c)).collect()
    }

    pub fn class_scores(&self, f: &Features) -> Vec<f64> {
        let d = self.distances(f);
        let logits: Vec<f64> = self
            .bias()
            .iter()
            .zip(&d)
            .map(|(b, d)| (b - d) / self.params.temperature)
            .collect();
        softmax(&logits)
    }

    /// Classifies one feature vector.
    pub fn classify(&self, f: &Features, open_set: bool) -> (u32, f64, Vec<f64>, f64) {
        let d = self.distances(f);
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let scores = self.class_scores(f);
        if open_set && dmin > self.delta {
            let conf = 1.0 - (-(dmin - self.delta) / self.delta).exp();
            return (UNKNOWN_CATEGORY, conf.clamp(0.0, 1.0), scores, dmin);
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        (self.classes[best], scores[best], scores, dmin)
    }

    /// Flattened centroids followed by priors.
    pub fn to_params(&self) -> ParamVector {
        let mut v: Vec<f64> = self.centroids.iter().flatten().copied().collect();
        v.extend(&self.priors);
        ParamVector {
            layout: self.layout(),
            values: v,
        }
    }

    pub fn layout(&self) -> String {
        format!("centroids{}x{FEATURE_DIM}+priors{}", self.classes.len(), self.classes.len())
    }

    pub fn with_params(&self, p: &ParamVector) -> Result<DetectorModel, WorldError> {
        let k = self.classes.len();
        if p.layout != self.layout() || p.values.len() != k * (FEATURE_DIM + 1) {
            return Err(WorldError::InvalidModel(format!(
                "parameter layout {} ({} values) does not fit {}",
                p.layout,
                p.values.len(),
                self.layout()
            )));
        }
        let mut m = self.clone();
        for (c, chunk) in m.centroids.iter_mut().zip(p.values.chunks(FEATURE_DIM)) {
            c.copy_from_slice(chunk);
        }
        m.priors.copy_from_slice(&p.values[k * FEATURE_DIM..]);
        Ok(m)
    }
}

/// Fits centroids, priors and the open-set radius on ground-truth boxes.
/// Every known category of `labeled` must have at least one usable example.
pub fn fit_supervised(
    labeled: &AnnotationSet,
    images: &ImageStore,
    params: &DetectorParams,
) -> Result<DetectorModel, WorldError> {
    params.validate()?;
    let classes: Vec<u32> = labeled.known_categories().map(|c| c.id).collect();
    if classes.is_empty() {
        return Err(WorldError::InvalidModel("no known categories".into()));
    }
    let feats = annotation_features(labeled, images, params)?;
    let k = classes.len();
    let mut sums = vec![[0.0; FEATURE_DIM]; k];
    let mut counts = vec![0.0; k];
    for (c, f) in &feats {
        let Some(i) = classes.iter().position(|x| x == c) else {
            continue;
        };
        for (s, v) in sums[i].iter_mut().zip(f) {
            *s += v;
        }
        counts[i] += 1.0;
    }
    if let Some(i) = counts.iter().position(|&n| n == 0.0) {
        return Err(WorldError::EmptyClass(classes[i]));
    }
    let centroids: Vec<Features> = sums
        .iter()
        .zip(&counts)
        .map(|(s, n)| {
            let mut c = [0.0; FEATURE_DIM];
            for (o, v) in c.iter_mut().zip(s) {
                *o = v / n;
            }
            c
        })
        .collect();
    let total: f64 = counts.iter().sum();
    let mut radius: f64 = 0.0;
    for (c, f) in &feats {
        if let Some(i) = classes.iter().position(|x| x == c) {
            radius = radius.max(distance(f, &centroids[i]));
        }
    }
    Ok(DetectorModel {
        params: params.clone(),
        priors: counts.iter().map(|n| n / total).collect(),
        evidence: counts,
        classes,
        centroids,
        delta: (radius * params.open_set_margin).max(1e-6),
    })
}

/// Runs proposal, feature extraction and classification on one image.
pub fn predict(model: &DetectorModel, img: &RasterImage, open_set: bool) -> Vec<DetectionResult> {
    let bg = background_estimate(img);
    propose(img, &bg, &model.params)
        .into_iter()
        .filter_map(|b| {
            let f = box_features(img, &bg, &b, &model.params)?;
            let (category_id, confidence, scores, distance) = model.classify(&f, open_set);
            Some(DetectionResult {
                bbox: b,
                category_id,
                confidence,
                scores,
                distance,
                features: f,
            })
        })
        .collect()
}

/// Running-mean update from labelled feature vectors, each counted with
/// `weight`. Unknown-class and unrecognised labels are ignored.
pub fn update_from_features(
    model: &DetectorModel,
    batch: &[(u32, Features)],
    weight: f64,
) -> Result<DetectorModel, WorldError> {
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(WorldError::InvalidModel(format!("update weight {weight} must be >= 0")));
    }
    let k = model.num_classes();
    let mut sums = vec![[0.0; FEATURE_DIM]; k];
    let mut counts = vec![0.0; k];
    for (c, f) in batch {
        if let Some(i) = model.index_of(*c) {
            for (s, v) in sums[i].iter_mut().zip(f) {
                *s += v;
            }
            counts[i] += 1.0;
        }
    }
    if weight == 0.0 || counts.iter().all(|&n| n == 0.0) {
        return Ok(model.clone());
    }
    let mut m = model.clone();
    for i in 0..k {
        if counts[i] == 0.0 {
            continue;
        }
        let add = weight * counts[i];
        let eta = add / (m.evidence[i] + add);
        for (c, s) in m.centroids[i].iter_mut().zip(&sums[i]) {
            let mean = s / counts[i];
            *c += eta * (mean - *c);
        }
        m.evidence[i] += add;
    }
    let total: f64 = m.evidence.iter().sum();
    m.priors = m.evidence.iter().map(|n| n / total).collect();
    Ok(m)
}

/// [`update_from_features`] on the annotations of `batch`.
pub fn update_model(
    model: &DetectorModel,
    batch: &AnnotationSet,
    images: &ImageStore,
    weight: f64,
) -> Result<DetectorModel, WorldError> {
    let feats = annotation_features(batch, images, &model.params)?;
    update_from_features(model, &feats, weight)
}

/// Predictions on a set of images as an annotation set over `categories`.
pub fn predict_set(
    model: &DetectorModel,
    images: &AnnotationSet,
    store: &ImageStore,
    open_set: bool,
) -> Result<AnnotationSet, WorldError> {
    let mut out = AnnotationSet::new(images.images.clone(), images.categories.clone());
    out.ensure_unknown_category();
    let mut id = 1;
    for info in &images.images {
        let img = store.get(&info.id).ok_or(WorldError::MissingImage(info.id))?;
        for d in predict(model, img, open_set) {
            out.annotations.push(Annotation {
                id,
                image_id: info.id,
                category_id: d.category_id,
                bbox: d.bbox,
                score: Some(d.confidence),
            });
            id += 1;
        }
    }
    Ok(out)
}
