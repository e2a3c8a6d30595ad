//! Synthetic "shape world": coloured axis-aligned shapes on a noisy dark
//! background, with a geometric class-imbalance law over the known classes and
//! held-out unknown classes that only occur in the unlabeled and test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationSet, Category, ImageInfo, UNKNOWN_CATEGORY};
use crate::error::WorldError;
use crate::geometry::BBox;
use crate::raster::{RasterImage, Rgb};
use crate::seed::{child_seed, stream_rng, Rng};

pub type ImageStore = BTreeMap<u64, RasterImage>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
    Cross,
    Ring,
    Triangle,
}

impl Shape {
    /// Whether the normalised point `(u, v)` in `[-1, 1]^2` is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Rect => true,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            Shape::Ring => u.abs().max(v.abs()) >= 0.7,
            Shape::Triangle => u.abs() <= (v + 1.0) / 2.0,
        }
    }
}

/// Appearance of one object class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub color: Rgb,
    pub shape: Shape,
    /// Nominal width / height.
    pub aspect: f64,
}

fn style(name: &str, color: Rgb, shape: Shape, aspect: f64) -> ClassStyle {
    ClassStyle {
        name: name.into(),
        color,
        shape,
        aspect,
    }
}

/// Built-in palette. Known classes take the first `K` entries and unknown
/// classes the next `U`; the default unknowns resemble the majority class.
pub fn palette() -> Vec<ClassStyle> {
    vec![
        style("red-square", [215, 70, 55], Shape::Rect, 1.0),
        style("vermilion-square", [220, 95, 50], Shape::Rect, 1.0),
        style("green-disc", [70, 205, 85], Shape::Ellipse, 1.0),
        style("blue-bar", [75, 95, 225], Shape::Rect, 1.9),
        style("sea-green-disc", [70, 205, 102], Shape::Ellipse, 1.0),
        style("indigo-bar", [92, 92, 225], Shape::Rect, 2.1),
        style("red-disc", [220, 62, 52], Shape::Ellipse, 1.0),
        style("red-ring", [212, 72, 58], Shape::Ring, 1.0),
        style("yellow-diamond", [215, 200, 65], Shape::Diamond, 1.0),
        style("magenta-cross", [205, 70, 200], Shape::Cross, 1.0),
        style("cyan-pill", [65, 200, 215], Shape::Ellipse, 0.55),
        style("white-triangle", [210, 210, 210], Shape::Triangle, 1.0),
    ]
}

pub const BACKGROUND: Rgb = [40, 40, 40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub width: u32,
    pub height: u32,
    pub known_classes: usize,
    pub unknown_classes: usize,
    /// Majority / minority known-class count ratio.
    pub imbalance_ratio: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of objects in the unlabeled and test splits drawn from
    /// unknown classes.
    pub unknown_fraction: f64,
    pub labeled_images: usize,
    pub unlabeled_images: usize,
    pub test_images: usize,
    /// Labelled images that include unknown objects; used only to measure
    /// the supervised model's per-class AP.
    pub validation_images: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Per-object colour jitter standard deviation.
    pub color_jitter: f64,
    /// Relative half-range of per-object aspect-ratio jitter.
    pub aspect_jitter: f64,
    /// Palette indices for the known then unknown classes; empty takes the
    /// palette in order.
    #[serde(default)]
    pub styles: Vec<usize>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            known_classes: 6,
            unknown_classes: 2,
            imbalance_ratio: 8.0,
            min_objects: 1,
            max_objects: 3,
            unknown_fraction: 0.2,
            labeled_images: 150,
            unlabeled_images: 1300,
            test_images: 400,
            validation_images: 150,
            min_size: 8,
            max_size: 14,
            noise: 6.0,
            color_jitter: 6.0,
            aspect_jitter: 0.06,
            styles: Vec::new(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidConfig(m));
        if self.known_classes < 2 || self.unknown_classes < 1 {
            return bad(format!(
                "need at least 2 known and 1 unknown class, got {} and {}",
                self.known_classes, self.unknown_classes
            ));
        }
        let n = self.known_classes + self.unknown_classes;
        if self.styles.is_empty() {
            if n > palette().len() {
                return bad(format!("palette holds only {} classes", palette().len()));
            }
        } else {
            if self.styles.len() != n {
                return bad(format!("styles lists {} entries for {n} classes", self.styles.len()));
            }
            if let Some(s) = self.styles.iter().find(|&&s| s >= palette().len()) {
                return bad(format!("style index {s} outside the palette"));
            }
            let mut seen = self.styles.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != n {
                return bad("style indices repeat".into());
            }
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad(format!("imbalance ratio {} must be >= 1", self.imbalance_ratio));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("objects per image range is empty".into());
        }
        if !(0.0..1.0).contains(&self.unknown_fraction) {
            return bad(format!("unknown fraction {} outside [0, 1)", self.unknown_fraction));
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return bad("object size range invalid (min size is 4)".into());
        }
        if self.max_size >= self.width.min(self.height) {
            return bad("objects larger than the image".into());
        }
        if self.labeled_images == 0 || self.test_images == 0 || self.validation_images == 0 {
            return bad("labeled, validation and test splits must be non-empty".into());
        }
        if !(0.0..0.5).contains(&self.aspect_jitter) {
            return bad(format!("aspect jitter {} outside [0, 0.5)", self.aspect_jitter));
        }
        if self.noise < 0.0 || self.color_jitter < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// Relative frequency of known class `c` (1-based): geometric decay from 1
    /// down to `1 / imbalance_ratio`.
    pub fn class_weight(&self, c: usize) -> f64 {
        if self.known_classes == 1 {
            return 1.0;
        }
        let t = (c - 1) as f64 / (self.known_classes - 1) as f64;
        self.imbalance_ratio.powf(-t)
    }

    /// Styles of the known then unknown classes.
    pub fn style_table(&self) -> Vec<ClassStyle> {
        let p = palette();
        if self.styles.is_empty() {
            p.into_iter().take(self.known_classes + self.unknown_classes).collect()
        } else {
            self.styles.iter().map(|&i| p[i].clone()).collect()
        }
    }

    pub fn known_categories(&self) -> Vec<Category> {
        let p = self.style_table();
        let mut cats = vec![Category::unknown()];
        cats.extend((1..=self.known_classes).map(|c| Category::new(c as u32, p[c - 1].name.clone())));
        cats
    }
}

/// One dataset split. `truth` records every object including unknown ones
/// (category 0); `style_of` maps annotation id to class slot so unknown
/// objects keep their identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub truth: AnnotationSet,
    pub images: ImageStore,
    pub style_of: BTreeMap<u64, usize>,
}

impl Split {
    /// Image table with no annotations, as seen by a semi-supervised learner.
    pub fn unlabeled_view(&self) -> AnnotationSet {
        AnnotationSet::new(self.truth.images.clone(), self.truth.categories.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub labeled: Split,
    pub unlabeled: Split,
    pub test: Split,
    pub validation: Split,
}

impl World {
    pub fn categories(&self) -> &[Category] {
        &self.labeled.truth.categories
    }
}

/// Exact class counts by largest remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let missing = total - counts.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

struct Placed {
    rect: (u32, u32, u32, u32),
    style: usize,
}

fn place_objects(
    cfg: &WorldConfig,
    styles: &[usize],
    rng: &mut Rng,
    image: u64,
) -> Result<Vec<Placed>, WorldError> {
    const ATTEMPTS: usize = 400;
    const GAP: u32 = 2;
    let p = cfg.style_table();
    let mut placed: Vec<Placed> = Vec::new();
    for &s in styles {
        let mut ok = false;
        for _ in 0..ATTEMPTS {
            let size = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
            let aspect = p[s].aspect * (1.0 + cfg.aspect_jitter * rng.random_range(-1.0..=1.0));
            let (w, h) = if aspect >= 1.0 {
                (size, size / aspect)
            } else {
                (size * aspect, size)
            };
            let w = (w.round() as u32).clamp(4, cfg.width - 2);
            let h = (h.round() as u32).clamp(4, cfg.height - 2);
            let x = rng.random_range(1..=cfg.width - w - 1);
            let y = rng.random_range(1..=cfg.height - h - 1);
            let clear = placed.iter().all(|o| {
                let (ox, oy, ow, oh) = o.rect;
                x + w + GAP <= ox || ox + ow + GAP <= x || y + h + GAP <= oy || oy + oh + GAP <= y
            });
            if clear {
                placed.push(Placed {
                    rect: (x, y, w, h),
                    style: s,
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(WorldError::InfeasiblePacking {
                image,
                objects: styles.len(),
                attempts: ATTEMPTS,
            });
        }
    }
    Ok(placed)
}

fn jitter(v: f64, rng: &mut Rng, n: &Normal<f64>) -> f64 {
    v + n.sample(rng)
}

/// Renders objects and returns the tight pixel box of each.
fn render(
    cfg: &WorldConfig,
    objects: &[Placed],
    rng: &mut Rng,
) -> (RasterImage, Vec<BBox>) {
    let p = cfg.style_table();
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).expect("finite sigma");
    let cj = Normal::new(0.0, cfg.color_jitter.max(1e-9)).expect("finite sigma");
    let gain: f64 = rng.random_range(0.85..1.15);
    let mut base = vec![[0f64; 3]; (cfg.width * cfg.height) as usize];
    for px in base.iter_mut() {
        for c in 0..3 {
            px[c] = BACKGROUND[c] as f64;
        }
    }
    let mut boxes = Vec::with_capacity(objects.len());
    for o in objects {
        let (x0, y0, w, h) = o.rect;
        let st = &p[o.style];
        let color: Vec<f64> = st.color.iter().map(|&c| jitter(c as f64, rng, &cj)).collect();
        let (mut bx0, mut by0, mut bx1, mut by1) = (u32::MAX, u32::MAX, 0, 0);
        for j in 0..h {
            for i in 0..w {
                let u = (i as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let v = (j as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                if st.shape.contains(u, v) {
                    let (x, y) = (x0 + i, y0 + j);
                    let px = &mut base[(y * cfg.width + x) as usize];
                    px.copy_from_slice(&color);
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        boxes.push(BBox {
            x: bx0 as f64,
            y: by0 as f64,
            w: (bx1 - bx0) as f64,
            h: (by1 - by0) as f64,
        });
    }
    let pixels = base
        .into_iter()
        .map(|px| {
            let mut out = [0u8; 3];
            for c in 0..3 {
                out[c] = (px[c] * gain + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
            }
            out
        })
        .collect();
    (
        RasterImage::new(cfg.width, cfg.height, pixels).expect("dimensions validated"),
        boxes,
    )
}

fn build_split(
    cfg: &WorldConfig,
    split_tag: u64,
    n_images: usize,
    with_unknown: bool,
    first_image_id: u64,
) -> Result<Split, WorldError> {
    let mut rng = stream_rng(child_seed(cfg.seed, split_tag), 0);
    let per_image: Vec<usize> = (0..n_images)
        .map(|_| rng.random_range(cfg.min_objects..=cfg.max_objects))
        .collect();
    let total: usize = per_image.iter().sum();
    let n_unknown = if with_unknown {
        (cfg.unknown_fraction * total as f64).round() as usize
    } else {
        0
    };
    let weights: Vec<f64> = (1..=cfg.known_classes).map(|c| cfg.class_weight(c)).collect();
    let mut styles: Vec<usize> = Vec::with_capacity(total);
    for (c, n) in apportion(total - n_unknown, &weights).into_iter().enumerate() {
        styles.extend(std::iter::repeat_n(c, n));
    }
    let uw = vec![1.0; cfg.unknown_classes];
    for (u, n) in apportion(n_unknown, &uw).into_iter().enumerate() {
        styles.extend(std::iter::repeat_n(cfg.known_classes + u, n));
    }
    styles.shuffle(&mut rng);

    let categories = cfg.known_categories();
    let mut truth = AnnotationSet::new(Vec::new(), categories);
    let mut images = ImageStore::new();
    let mut style_of = BTreeMap::new();
    let mut next_ann = 1u64;
    let mut cursor = 0;
    for (i, &k) in per_image.iter().enumerate() {
        let id = first_image_id + i as u64;
        let mut irng = stream_rng(child_seed(cfg.seed, split_tag), id);
        let objs = place_objects(cfg, &styles[cursor..cursor + k], &mut irng, id)?;
        cursor += k;
        let (img, boxes) = render(cfg, &objs, &mut irng);
        for (o, b) in objs.iter().zip(boxes) {
            let category_id = if o.style < cfg.known_classes {
                o.style as u32 + 1
            } else {
                UNKNOWN_CATEGORY
            };
            truth.annotations.push(Annotation {
                id: next_ann,
                image_id: id,
                category_id,
                bbox: b,
                score: None,
            });
            style_of.insert(next_ann, o.style);
            next_ann += 1;
        }
        truth.images.push(ImageInfo {
            id,
            width: cfg.width,
            height: cfg.height,
            file_name: format!("img_{id:06}.ppm"),
        });
        images.insert(id, img);
    }
    Ok(Split {
        truth,
        images,
        style_of,
    })
}

/// Generates the labeled, unlabeled, test and validation splits. Deterministic in `cfg.seed`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, WorldError> {
    cfg.validate()?;
    let l = cfg.labeled_images as u64;
    let u = cfg.unlabeled_images as u64;
    let t = cfg.test_images as u64;
    Ok(World {
        config: cfg.clone(),
        labeled: build_split(cfg, 1, cfg.labeled_images, false, 1)?,
        unlabeled: build_split(cfg, 2, cfg.unlabeled_images, true, l + 1)?,
        test: build_split(cfg, 3, cfg.test_images, true, l + u + 1)?,
        validation: build_split(cfg, 4, cfg.validation_images, true, l + u + t + 1)?,
    })
}
