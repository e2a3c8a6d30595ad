//! Mean-teacher training loop with optional class-balanced synthesis and
//! open-set label fusion, loss accounting, and the four-way ablation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::annotations::{class_frequencies, filter_by_confidence, Annotation, AnnotationSet, UNKNOWN_CATEGORY};
use crate::cce::{balance_library, build_library, synthesize, SynthesisConfig};
use crate::detector::{
    annotation_features, fit_supervised, predict, predict_set, update_from_features, DetectionResult,
    DetectorModel, DetectorParams, Features,
};
use crate::ema::{ema_update, EmaState, ParamVector};
use crate::error::{CceError, Error, Result};
use crate::fusion::{build_threshold_table, conflicting_known_ids, fuse, FusionConfig, ThresholdTable};
use crate::geometry::iou;
use crate::metrics::{evaluate, ApTable, AP50};
use crate::raster::{apply_augmentation, AugmentationSpec, CoordinateMap};
use crate::seed::{child_seed, stream_rng};
use crate::world::{generate_world, ImageStore, World, WorldConfig};

/// IoU at which predictions are paired in the loss terms.
pub const LOSS_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub l_s: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_u: f64,
    pub l_consistency: f64,
    pub l_pseudo: f64,
    pub lambda: f64,
    pub l: f64,
}

impl LossReport {
    pub fn compose(iteration: usize, l_cls: f64, l_loc: f64, l_consistency: f64, l_pseudo: f64, lambda: f64) -> Self {
        let l_s = l_cls + l_loc;
        let l_u = l_consistency + l_pseudo;
        Self {
            iteration,
            l_s,
            l_cls,
            l_loc,
            l_u,
            l_consistency,
            l_pseudo,
            lambda,
            l: l_s + lambda * l_u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub detector: DetectorParams,
    pub iterations: usize,
    pub lambda: f64,
    pub ema_alpha: f64,
    pub pseudo_threshold: f64,
    pub enable_cce: bool,
    pub enable_oodfc: bool,
    pub fusion: FusionConfig,
    pub synthesis: SynthesisConfig,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub synthetic_batch: usize,
    /// Evaluate the final teacher with open-set rejection enabled.
    pub eval_open_set: bool,
    /// Keep per-iteration pseudo-labels and parameters in the result.
    pub trace: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            detector: DetectorParams::default(),
            iterations: 2000,
            lambda: 1.0,
            ema_alpha: 0.999,
            pseudo_threshold: 0.7,
            enable_cce: false,
            enable_oodfc: false,
            fusion: FusionConfig::default(),
            synthesis: SynthesisConfig::default(),
            labeled_batch: 4,
            unlabeled_batch: 8,
            synthetic_batch: 4,
            eval_open_set: true,
            trace: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("ema_alpha", self.ema_alpha)?;
        unit("pseudo_threshold", self.pseudo_threshold)?;
        unit("fusion.iou_gate", self.fusion.iou_gate)?;
        unit("fusion.base_unknown_threshold", self.fusion.base_unknown_threshold)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.synthetic_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.fusion.validate()?;
        self.synthesis.validate()?;
        self.detector.validate()?;
        self.world.validate()?;
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults. Keys are field
    /// names, nested with dots (`world.imbalance_ratio`); `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("config serializes");
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, val) = (key.trim(), val.trim());
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("line {}: unknown key {key:?}", n + 1)))?;
            }
            if slot.is_object() {
                return Err(Error::Config(format!("line {}: {key:?} is a section, not a field", n + 1)));
            }
            let parsed: serde_json::Value =
                serde_json::from_str(val).unwrap_or_else(|_| serde_json::Value::String(val.to_string()));
            let kind_ok = matches!(
                (&*slot, &parsed),
                (serde_json::Value::Number(_), serde_json::Value::Number(_))
                    | (serde_json::Value::Bool(_), serde_json::Value::Bool(_))
                    | (serde_json::Value::String(_), serde_json::Value::String(_))
                    | (serde_json::Value::Array(_), serde_json::Value::Array(_))
            );
            if !kind_ok {
                return Err(Error::Config(format!("line {}: bad value {val:?} for {key:?}", n + 1)));
            }
            *slot = parsed;
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, in `from_kv_str` syntax.
    pub fn to_kv_string(&self) -> String {
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
            match v {
                serde_json::Value::Object(m) => {
                    for (k, x) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, x, out);
                    }
                }
                _ => out.push_str(&format!("{prefix} = {v}\n")),
            }
        }
        let mut out = String::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Copy with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.world.seed = seed;
        c.synthesis.seed = child_seed(seed, 0xCCE);
        c
    }
}

/// Pairs of `(a, b)` indices with IoU >= `thresh`, taken greedily by
/// descending IoU; ties go to the lower `(a, b)` pair.
pub fn greedy_pairs(a: &[crate::geometry::BBox], b: &[crate::geometry::BBox], thresh: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let v = iou(x, y);
            if v >= thresh {
                cand.push((v, i, j));
            }
        }
    }
    cand.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    let (mut ua, mut ub) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !ua[i] && !ub[j] {
            ua[i] = true;
            ub[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Squared score-vector disagreement between two views of one image.
/// `preds_strong` boxes are mapped back through `strong_map` first;
/// `preds_weak` must already be in original coordinates.
pub fn consistency_loss(preds_weak: &[DetectionResult], preds_strong: &[DetectionResult], strong_map: &CoordinateMap) -> f64 {
    let wb: Vec<_> = preds_weak.iter().map(|d| d.bbox).collect();
    let sb: Vec<_> = preds_strong.iter().map(|d| strong_map.inverse(d.bbox)).collect();
    let pairs = greedy_pairs(&wb, &sb, LOSS_MATCH_IOU);
    let (mut mw, mut ms) = (vec![false; wb.len()], vec![false; sb.len()]);
    let mut total = 0.0;
    for &(i, j) in &pairs {
        mw[i] = true;
        ms[j] = true;
        total += preds_weak[i]
            .scores
            .iter()
            .zip(&preds_strong[j].scores)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    for (d, m) in preds_weak.iter().zip(&mw) {
        if !m {
            total += sq_norm(&d.scores);
        }
    }
    for (d, m) in preds_strong.iter().zip(&ms) {
        if !m {
            total += sq_norm(&d.scores);
        }
    }
    total
}

fn cross_entropy(scores: &[f64], classes: &[u32], target: u32) -> Option<f64> {
    let i = classes.iter().position(|&c| c == target)?;
    Some(-scores[i].max(1e-12).ln())
}

/// Mean cross-entropy of matched student predictions against the known-class
/// pseudo-labels of one image. Zero when nothing matches.
pub fn pseudo_loss(student: &[DetectionResult], classes: &[u32], pseudo: &[Annotation]) -> f64 {
    let pseudo: Vec<&Annotation> = pseudo.iter().filter(|a| a.category_id != UNKNOWN_CATEGORY).collect();
    let sb: Vec<_> = student.iter().map(|d| d.bbox).collect();
    let pb: Vec<_> = pseudo.iter().map(|a| a.bbox).collect();
    let mut sum = 0.0;
    let mut n = 0;
    for (i, j) in greedy_pairs(&sb, &pb, LOSS_MATCH_IOU) {
        if let Some(ce) = cross_entropy(&student[i].scores, classes, pseudo[j].category_id) {
            sum += ce;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Supervised terms for one image: summed classification cross-entropy and
/// `1 - IoU` over ground-truth objects, with the object count. Unmatched
/// objects cost `ln K` and 1.
fn supervised_terms(student: &[DetectionResult], classes: &[u32], gt: &[&Annotation]) -> (f64, f64, usize) {
    let sb: Vec<_> = student.iter().map(|d| d.bbox).collect();
    let gb: Vec<_> = gt.iter().map(|a| a.bbox).collect();
    let uniform = (classes.len() as f64).ln();
    let mut cls = vec![uniform; gt.len()];
    let mut loc = vec![1.0; gt.len()];
    for (i, j) in greedy_pairs(&sb, &gb, LOSS_MATCH_IOU) {
        cls[j] = cross_entropy(&student[i].scores, classes, gt[j].category_id).unwrap_or(uniform);
        loc[j] = 1.0 - iou(&sb[i], &gb[j]);
    }
    (cls.iter().sum(), loc.iter().sum(), gt.len())
}

/// Labels produced in one iteration: the confidence-filtered teacher labels
/// and, with fusion enabled, the fused set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLabels {
    pub iteration: usize,
    pub pseudo: Vec<Annotation>,
    pub fused: Option<Vec<Annotation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub teacher_initial: ParamVector,
    pub student: Vec<ParamVector>,
    pub teacher: Vec<ParamVector>,
    pub labels: Vec<IterationLabels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub supervised: DetectorModel,
    pub teacher: DetectorModel,
    pub losses: Vec<LossReport>,
    pub test_ap: ApTable,
    pub test_predictions: AnnotationSet,
    /// Class used as the majority (most frequent labelled class).
    pub majority_class: u32,
    /// Unknown test objects covered by a majority-class prediction.
    pub unknown_as_majority: usize,
    pub synthetic_images: usize,
    pub trace: Option<RunTrace>,
}

fn features_by_image(set: &AnnotationSet, store: &ImageStore, p: &DetectorParams) -> Result<BTreeMap<u64, Vec<(u32, Features)>>> {
    let mut out: BTreeMap<u64, Vec<(u32, Features)>> = set.images.iter().map(|i| (i.id, Vec::new())).collect();
    for (image_id, anns) in set.by_image() {
        let sub = AnnotationSet {
            images: set.image(image_id).into_iter().cloned().collect(),
            categories: set.categories.clone(),
            annotations: anns.into_iter().cloned().collect(),
        };
        out.insert(image_id, annotation_features(&sub, store, p)?);
    }
    Ok(out)
}

fn most_frequent(set: &AnnotationSet) -> u32 {
    let st = class_frequencies(set);
    st.counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(c, _)| *c)
        .unwrap_or(UNKNOWN_CATEGORY)
}

/// Unknown ground-truth objects overlapped (IoU >= 0.5) by a prediction of `class`.
pub fn unknown_hits(gt: &AnnotationSet, pred: &AnnotationSet, class: u32) -> usize {
    let preds = pred.by_image();
    gt.annotations
        .iter()
        .filter(|a| a.category_id == UNKNOWN_CATEGORY)
        .filter(|a| {
            preds.get(&a.image_id).is_some_and(|ps| {
                ps.iter().any(|p| p.category_id == class && iou(&p.bbox, &a.bbox) >= AP50)
            })
        })
        .count()
}

/// Synthetic data for the balanced-embedding step.
struct Synthetic {
    set: AnnotationSet,
    images: ImageStore,
}

fn synthetic_data(world: &World, cfg: &RunConfig) -> std::result::Result<Synthetic, CceError> {
    let lab = &world.labeled;
    let load_lab = |info: &crate::annotations::ImageInfo| {
        lab.images.get(&info.id).cloned().ok_or_else(|| CceError::Unloadable {
            image_id: info.id,
            reason: "not in store".into(),
        })
    };
    let lib = build_library(&lab.truth, load_lab)?;
    let balanced = balance_library(&lib, child_seed(cfg.synthesis.seed, 1))?;
    let unl = &world.unlabeled;
    let load_unl = |info: &crate::annotations::ImageInfo| {
        unl.images.get(&info.id).cloned().ok_or_else(|| CceError::Unloadable {
            image_id: info.id,
            reason: "not in store".into(),
        })
    };
    let out = synthesize(&balanced, &unl.unlabeled_view(), load_unl, &cfg.synthesis)?;
    Ok(Synthetic {
        set: out.set,
        images: out.images,
    })
}

fn pick(rng: &mut crate::seed::Rng, ids: &[u64], k: usize) -> Vec<u64> {
    let mut idx = sample(rng, ids.len(), k.min(ids.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| ids[i]).collect()
}

fn with_iteration<T, E: Into<Error>>(iteration: usize, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| Error::Iteration {
        iteration,
        source: Box::new(e.into()),
    })
}

/// Generates the world for `cfg` and trains on it.
pub fn train_run(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    train_on_world(cfg, &world)
}

/// Trains one configuration on a given world.
pub fn train_on_world(cfg: &RunConfig, world: &World) -> Result<RunResult> {
    cfg.validate()?;
    let p = &cfg.detector;
    let lab = &world.labeled;
    let unl = &world.unlabeled;

    let supervised = fit_supervised(&lab.truth, &lab.images, p)?;
    let mut student = supervised.clone();

    let lab_feats = features_by_image(&lab.truth, &lab.images, p)?;
    let lab_ids: Vec<u64> = lab.truth.images.iter().map(|i| i.id).collect();

    let (syn_feats, syn_ids) = if cfg.enable_cce {
        let syn = synthetic_data(world, cfg)?;
        let feats = features_by_image(&syn.set, &syn.images, p)?;
        let all: Vec<(u32, Features)> = feats.values().flatten().copied().collect();
        student = update_from_features(&student, &all, cfg.synthesis.synthetic_score)?;
        let ids: Vec<u64> = syn.set.images.iter().map(|i| i.id).collect();
        (feats, ids)
    } else {
        (BTreeMap::new(), Vec::new())
    };

    let mut teacher = EmaState::new(cfg.ema_alpha, student.to_params())?;
    let teacher_initial = teacher.current.clone();

    // Fusion inputs are fixed by the supervised model.
    let (thresholds, open_set): (Option<ThresholdTable>, BTreeMap<u64, Vec<DetectionResult>>) = if cfg.enable_oodfc {
        let val = &world.validation;
        let val_pred = predict_set(&supervised, &val.unlabeled_view(), &val.images, false)?;
        let aps = evaluate(&val.truth, &val_pred, AP50)?;
        let t = build_threshold_table(&aps, &lab.truth.categories, &cfg.fusion)?;
        let mut cache = BTreeMap::new();
        for (id, img) in &unl.images {
            let unk: Vec<DetectionResult> = predict(&supervised, img, true)
                .into_iter()
                .filter(|d| d.category_id == UNKNOWN_CATEGORY)
                .collect();
            cache.insert(*id, unk);
        }
        (Some(t), cache)
    } else {
        (None, BTreeMap::new())
    };

    let unl_view = unl.unlabeled_view();
    let unl_ids: Vec<u64> = unl_view.images.iter().map(|i| i.id).collect();
    let classes = student.classes.clone();
    let mut rng = stream_rng(child_seed(cfg.seed, 0x7EA), 0);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut trace = cfg.trace.then(|| RunTrace {
        teacher_initial: teacher_initial.clone(),
        student: Vec::new(),
        teacher: Vec::new(),
        labels: Vec::new(),
    });

    for it in 1..=cfg.iterations {
        let teacher_model = with_iteration(it, student.with_params(&teacher.current))?;

        // supervised batch
        let batch = pick(&mut rng, &lab_ids, cfg.labeled_batch);
        let (mut cls_sum, mut loc_sum, mut n_gt) = (0.0, 0.0, 0);
        let mut lab_batch: Vec<(u32, Features)> = Vec::new();
        let lab_by_image = lab.truth.by_image();
        for id in &batch {
            let preds = predict(&student, &lab.images[id], false);
            let gt = lab_by_image.get(id).cloned().unwrap_or_default();
            let (c, l, n) = supervised_terms(&preds, &classes, &gt);
            cls_sum += c;
            loc_sum += l;
            n_gt += n;
            lab_batch.extend(&lab_feats[id]);
        }
        let denom = n_gt.max(1) as f64;
        let (l_cls, l_loc) = (cls_sum / denom, loc_sum / denom);

        // unlabeled batch: teacher labels on the weak view
        let ubatch = pick(&mut rng, &unl_ids, cfg.unlabeled_batch);
        let mut candidates = AnnotationSet::new(
            ubatch.iter().filter_map(|id| unl_view.image(*id).cloned()).collect(),
            unl_view.categories.clone(),
        );
        let mut cand_feats: BTreeMap<u64, Features> = BTreeMap::new();
        let (mut cons_sum, mut pseudo_views) = (0.0, Vec::new());
        for id in &ubatch {
            let img = &unl.images[id];
            let weak = AugmentationSpec::sample_weak(rng.random());
            let strong = AugmentationSpec::sample_strong(rng.random(), img.width(), img.height());
            let (wimg, wmap) = with_iteration(it, apply_augmentation(img, &weak))?;
            let (simg, smap) = with_iteration(it, apply_augmentation(img, &strong))?;
            for d in predict(&teacher_model, &wimg, false) {
                let aid = candidates.annotations.len() as u64 + 1;
                cand_feats.insert(aid, d.features);
                candidates.annotations.push(Annotation {
                    id: aid,
                    image_id: *id,
                    category_id: d.category_id,
                    bbox: wmap.inverse(d.bbox),
                    score: Some(d.confidence),
                });
            }
            let mut sw = predict(&student, &wimg, false);
            for d in &mut sw {
                d.bbox = wmap.inverse(d.bbox);
            }
            let ss = predict(&student, &simg, false);
            cons_sum += consistency_loss(&sw, &ss, &smap);
            pseudo_views.push((*id, sw));
        }
        let pl1 = with_iteration(it, filter_by_confidence(&candidates, cfg.pseudo_threshold))?;

        let (train_labels, fused) = match &thresholds {
            Some(t) => {
                let mut unknown = AnnotationSet::new(pl1.images.clone(), pl1.categories.clone());
                unknown.ensure_unknown_category();
                let mut known = pl1.clone();
                known.ensure_unknown_category();
                for id in &ubatch {
                    for d in &open_set[id] {
                        unknown.annotations.push(Annotation {
                            id: unknown.annotations.len() as u64 + 1,
                            image_id: *id,
                            category_id: UNKNOWN_CATEGORY,
                            bbox: d.bbox,
                            score: Some(d.confidence),
                        });
                    }
                }
                let fused = with_iteration(it, fuse(&known, &unknown, t, &cfg.fusion))?;
                let drop = conflicting_known_ids(&fused, cfg.fusion.iou_gate);
                let keep: Vec<Annotation> = fused
                    .annotations
                    .iter()
                    .filter(|a| a.category_id != UNKNOWN_CATEGORY && !drop.contains(&a.id))
                    .cloned()
                    .collect();
                (keep, Some(fused.annotations))
            }
            None => (pl1.annotations.clone(), None),
        };

        let by_image: BTreeMap<u64, Vec<Annotation>> = train_labels.iter().fold(BTreeMap::new(), |mut m, a| {
            m.entry(a.image_id).or_insert_with(Vec::new).push(a.clone());
            m
        });
        let mut pseudo_sum = 0.0;
        for (id, sw) in &pseudo_views {
            pseudo_sum += pseudo_loss(sw, &classes, by_image.get(id).map(Vec::as_slice).unwrap_or(&[]));
        }
        let nu = ubatch.len().max(1) as f64;
        losses.push(LossReport::compose(it, l_cls, l_loc, cons_sum / nu, pseudo_sum / nu, cfg.lambda));

        // student update
        student = with_iteration(it, update_from_features(&student, &lab_batch, 1.0))?;
        if !syn_ids.is_empty() {
            let sb = pick(&mut rng, &syn_ids, cfg.synthetic_batch);
            let feats: Vec<(u32, Features)> = sb.iter().flat_map(|id| syn_feats[id].iter().copied()).collect();
            student = with_iteration(it, update_from_features(&student, &feats, cfg.synthesis.synthetic_score))?;
        }
        let pl_feats: Vec<(u32, Features)> = train_labels.iter().map(|a| (a.category_id, cand_feats[&a.id])).collect();
        student = with_iteration(it, update_from_features(&student, &pl_feats, cfg.lambda))?;
        let sp = student.to_params();
        teacher = with_iteration(it, ema_update(&teacher, &sp))?;

        if let Some(tr) = trace.as_mut() {
            tr.student.push(sp);
            tr.teacher.push(teacher.current.clone());
            tr.labels.push(IterationLabels {
                iteration: it,
                pseudo: pl1.annotations.clone(),
                fused,
            });
        }
    }

    let final_teacher = student.with_params(&teacher.current)?;
    let test = &world.test;
    let preds = predict_set(&final_teacher, &test.unlabeled_view(), &test.images, cfg.eval_open_set)?;
    let test_ap = evaluate(&test.truth, &preds, AP50)?;
    let majority_class = most_frequent(&lab.truth);
    let unknown_as_majority = unknown_hits(&test.truth, &preds, majority_class);
    Ok(RunResult {
        supervised,
        teacher: final_teacher,
        losses,
        test_ap,
        test_predictions: preds,
        majority_class,
        unknown_as_majority,
        synthetic_images: syn_ids.len(),
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+CCE")]
    Cce,
    #[serde(rename = "+OODFC")]
    Oodfc,
    #[serde(rename = "+CCE+OODFC")]
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Cce, Variant::Oodfc, Variant::Both];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cce => "+CCE",
            Variant::Oodfc => "+OODFC",
            Variant::Both => "+CCE+OODFC",
        }
    }

    pub fn toggles(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Cce => (true, false),
            Variant::Oodfc => (false, true),
            Variant::Both => (true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub seed: u64,
    pub variant: Variant,
    pub map: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub rare_mean_ap: f64,
    pub unknown_as_majority: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_map: f64,
    pub median_rare_mean_ap: f64,
    pub median_unknown_as_majority: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub class_names: BTreeMap<u32, String>,
    /// The two least frequent labelled classes.
    pub rare_classes: Vec<u32>,
    pub majority_class: u32,
    pub runs: Vec<VariantRun>,
    pub medians: Vec<VariantSummary>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn summary(&self, v: Variant) -> &VariantSummary {
        self.medians.iter().find(|s| s.variant == v).expect("all variants summarised")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let classes: Vec<u32> = self.class_names.keys().copied().collect();
        out.push_str(&format!("{:<6} {:<12}", "seed", "variant"));
        for c in &classes {
            out.push_str(&format!(" {:>7}", format!("AP{c}")));
        }
        out.push_str(&format!(" {:>7} {:>7} {:>8}\n", "mAP50", "rare", "unk->maj"));
        for r in &self.runs {
            out.push_str(&format!("{:<6} {:<12}", r.seed, r.variant.name()));
            for c in &classes {
                out.push_str(&format!(" {:>7.4}", r.per_class.get(c).copied().unwrap_or(f64::NAN)));
            }
            out.push_str(&format!(" {:>7.4} {:>7.4} {:>8}\n", r.map, r.rare_mean_ap, r.unknown_as_majority));
        }
        out.push_str(&format!("\nmedians over seeds {:?}\n", self.seeds));
        out.push_str(&format!("{:<12} {:>7} {:>7} {:>8}\n", "variant", "mAP50", "rare", "unk->maj"));
        for s in &self.medians {
            out.push_str(&format!(
                "{:<12} {:>7.4} {:>7.4} {:>8.1}\n",
                s.variant.name(),
                s.median_map,
                s.median_rare_mean_ap,
                s.median_unknown_as_majority
            ));
        }
        out.push_str(&format!(
            "rare classes {:?}, majority class {}\n",
            self.rare_classes, self.majority_class
        ));
        out
    }
}

/// The rarest two known classes of a labelled set, rarest first.
pub fn rare_classes(set: &AnnotationSet) -> Vec<u32> {
    let st = class_frequencies(set);
    let mut v: Vec<(u64, u32)> = st.counts.iter().map(|(c, n)| (*n, *c)).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    v.into_iter().take(2).map(|(_, c)| c).collect()
}

/// Results of one seed: the four variants trained on one shared world.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<(World, Vec<(Variant, RunResult)>)> {
    let base = cfg.with_seed(seed);
    base.validate()?;
    let world = generate_world(&base.world)?;
    let mut out = Vec::new();
    for v in Variant::ALL {
        let (cce, oodfc) = v.toggles();
        let c = RunConfig {
            enable_cce: cce,
            enable_oodfc: oodfc,
            ..base.clone()
        };
        out.push((v, train_on_world(&c, &world)?));
    }
    Ok((world, out))
}

/// Runs all four variants for each seed and summarises by median.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    run_ablation_with(cfg, seeds, |_, _, _| Ok(()))
}

/// [`run_ablation`] with a hook called for every finished run.
pub fn run_ablation_with<F>(cfg: &RunConfig, seeds: &[u64], mut on_run: F) -> Result<AblationReport>
where
    F: FnMut(u64, &World, &[(Variant, RunResult)]) -> Result<()>,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut runs = Vec::new();
    let mut class_names = BTreeMap::new();
    let mut rare = Vec::new();
    let mut majority = UNKNOWN_CATEGORY;
    for &seed in seeds {
        let (world, results) = run_seed(cfg, seed)?;
        class_names = world
            .categories()
            .iter()
            .filter(|c| c.is_known())
            .map(|c| (c.id, c.name.clone()))
            .collect();
        rare = rare_classes(&world.labeled.truth);
        majority = most_frequent(&world.labeled.truth);
        let rare_set: BTreeSet<u32> = rare.iter().copied().collect();
        for (v, r) in &results {
            let rare_aps: Vec<f64> = rare_set.iter().filter_map(|c| r.test_ap.per_class.get(c).copied()).collect();
            runs.push(VariantRun {
                seed,
                variant: *v,
                map: r.test_ap.map,
                per_class: r.test_ap.per_class.clone(),
                rare_mean_ap: rare_aps.iter().sum::<f64>() / rare_aps.len().max(1) as f64,
                unknown_as_majority: r.unknown_as_majority,
            });
        }
        on_run(seed, &world, &results)?;
    }
    let medians = Variant::ALL
        .iter()
        .map(|&v| {
            let sel: Vec<&VariantRun> = runs.iter().filter(|r| r.variant == v).collect();
            VariantSummary {
                variant: v,
                median_map: median(&sel.iter().map(|r| r.map).collect::<Vec<_>>()),
                median_rare_mean_ap: median(&sel.iter().map(|r| r.rare_mean_ap).collect::<Vec<_>>()),
                median_unknown_as_majority: median(
                    &sel.iter().map(|r| r.unknown_as_majority as f64).collect::<Vec<_>>(),
                ),
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        class_names,
        rare_classes: rare,
        majority_class: majority,
        runs,
        medians,
    })
}
