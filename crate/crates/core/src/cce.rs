//! Category-balanced foreground embedding.
//!
//! Ground-truth boxes of the labeled set are cut out into a per-class
//! foreground library. The library is resampled so that every class holds
//! `round(f_target)` segments, `f_target` being the mean class frequency, and
//! each balanced segment is then alpha-blended into a random unlabeled image at
//! a random position where it fits entirely. Every paste yields an annotation
//! with the segment's class and a fixed confidence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationSet, Category, ImageInfo};
use crate::error::CceError;
use crate::geometry::BBox;
use crate::raster::{blend_region_in_place, load_ppm, save_ppm, PixelRect, RasterImage};
use crate::seed::{child_seed, stream_rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundSegment {
    pub crop: RasterImage,
    pub category_id: u32,
    pub source_image_id: u64,
    pub source_bbox: BBox,
}

/// Per-class foreground segments plus the category table they came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForegroundLibrary {
    pub categories: Vec<Category>,
    pub segments: BTreeMap<u32, Vec<ForegroundSegment>>,
}

impl ForegroundLibrary {
    /// Segment count per class, `f_c`. Only classes with segments appear.
    pub fn frequencies(&self) -> BTreeMap<u32, usize> {
        self.segments
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&c, v)| (c, v.len()))
            .collect()
    }

    /// Mean frequency over classes with at least one segment.
    pub fn target_frequency(&self) -> f64 {
        let f = self.frequencies();
        if f.is_empty() {
            return 0.0;
        }
        f.values().sum::<usize>() as f64 / f.len() as f64
    }

    /// `alpha_c = f_target / f_c` for every non-empty class.
    pub fn augmentation_factors(&self) -> BTreeMap<u32, f64> {
        let target = self.target_frequency();
        self.frequencies()
            .into_iter()
            .map(|(c, n)| (c, target / n as f64))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.segments.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ForegroundSegment> {
        self.segments.values().flatten()
    }
}

/// Integer pixel rectangle covering `b`, or `None` if it leaves the image.
fn pixel_rect(b: &BBox, width: u32, height: u32) -> Option<PixelRect> {
    let x = b.x.round();
    let y = b.y.round();
    let w = b.w.round().max(1.0);
    let h = b.h.round().max(1.0);
    if x < 0.0 || y < 0.0 || x + w > width as f64 || y + h > height as f64 {
        return None;
    }
    Some(PixelRect::new(x as u32, y as u32, w as u32, h as u32))
}

/// Cuts one segment per ground-truth annotation of a known class. Boxes are
/// snapped to the pixel grid.
pub fn build_library<F>(labeled: &AnnotationSet, mut load: F) -> Result<ForegroundLibrary, CceError>
where
    F: FnMut(&ImageInfo) -> Result<RasterImage, CceError>,
{
    labeled.validate()?;
    let mut segments: BTreeMap<u32, Vec<ForegroundSegment>> = BTreeMap::new();
    for (image_id, anns) in labeled.by_image() {
        let info = labeled.image(image_id).expect("validated");
        let anns: Vec<&Annotation> = anns
            .into_iter()
            .filter(|a| a.is_ground_truth() && a.category_id != crate::annotations::UNKNOWN_CATEGORY)
            .collect();
        if anns.is_empty() {
            continue;
        }
        let img = load(info)?;
        if img.width() != info.width || img.height() != info.height {
            return Err(CceError::SizeMismatch {
                image_id,
                want_w: info.width,
                want_h: info.height,
                found_w: img.width(),
                found_h: img.height(),
            });
        }
        for a in anns {
            let rect = pixel_rect(&a.bbox, img.width(), img.height()).ok_or(CceError::BoxOutOfBounds {
                annotation: a.id,
                image_id,
            })?;
            segments.entry(a.category_id).or_default().push(ForegroundSegment {
                crop: img.crop(rect)?,
                category_id: a.category_id,
                source_image_id: image_id,
                source_bbox: rect.to_bbox(),
            });
        }
    }
    Ok(ForegroundLibrary {
        categories: labeled.categories.clone(),
        segments,
    })
}

/// Resamples every class to `round(f_target)` segments. Classes above the
/// target are subsampled without replacement; classes below keep all their
/// segments and add duplicates drawn with replacement, each flipped
/// horizontally with probability 1/2.
pub fn balance_library(lib: &ForegroundLibrary, seed: u64) -> Result<ForegroundLibrary, CceError> {
    if lib.is_empty() {
        return Err(CceError::EmptyLibrary);
    }
    let target = lib.target_frequency().round() as usize;
    let mut segments = BTreeMap::new();
    for (&class, segs) in lib.segments.iter().filter(|(_, v)| !v.is_empty()) {
        let mut rng = stream_rng(seed, class as u64);
        let n = segs.len();
        let balanced = if n > target {
            let mut keep = index::sample(&mut rng, n, target).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| segs[i].clone()).collect()
        } else {
            let mut out = segs.clone();
            for _ in n..target {
                let src = &segs[rng.random_range(0..n)];
                let mut dup = src.clone();
                if rng.random_bool(0.5) {
                    dup.crop = dup.crop.flip_horizontal();
                }
                out.push(dup);
            }
            out
        };
        segments.insert(class, balanced);
    }
    Ok(ForegroundLibrary {
        categories: lib.categories.clone(),
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub beta: f64,
    pub synthetic_score: f64,
    pub placements_per_image: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            synthetic_score: 0.8,
            placements_per_image: 3,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), CceError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CceError::InvalidConfig(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.synthetic_score) {
            return Err(CceError::InvalidConfig(format!(
                "synthetic score {} outside [0, 1]",
                self.synthetic_score
            )));
        }
        if self.placements_per_image == 0 {
            return Err(CceError::InvalidConfig("placements_per_image must be positive".into()));
        }
        Ok(())
    }
}

/// Composited images with their annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub set: AnnotationSet,
    pub images: BTreeMap<u64, RasterImage>,
    /// Segments that fit no unlabeled image.
    pub skipped: usize,
}

/// One composite: a base unlabeled image and the segments pasted into it.
struct Group {
    base: usize,
    members: Vec<(usize, (u32, u32))>,
}

/// Blends every balanced segment into a randomly chosen unlabeled image.
///
/// Segments are visited in a seeded random order and packed into composites
/// of up to `placements_per_image`; a composite takes an unlabeled image the
/// first segment fits in, and later segments join it while they fit too.
/// Existing annotations of the chosen unlabeled image are carried over next to
/// the synthetic ones. Output image ids start after the largest unlabeled id.
pub fn synthesize<F>(
    lib: &ForegroundLibrary,
    unlabeled: &AnnotationSet,
    mut load: F,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutput, CceError>
where
    F: FnMut(&ImageInfo) -> Result<RasterImage, CceError>,
{
    cfg.validate()?;
    let segs: Vec<&ForegroundSegment> = lib.iter().collect();
    let mut rng = stream_rng(cfg.seed, 0);
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.shuffle(&mut rng);

    let fits = |s: &ForegroundSegment, img: &ImageInfo| s.crop.width() <= img.width && s.crop.height() <= img.height;
    let mut skipped = 0;
    let mut groups: Vec<Group> = Vec::new();
    for j in order {
        let seg = segs[j];
        // per-segment stream so placement does not depend on grouping history
        let mut prng = stream_rng(child_seed(cfg.seed, 1), j as u64);
        let open = groups
            .last()
            .filter(|g| g.members.len() < cfg.placements_per_image && fits(seg, &unlabeled.images[g.base]))
            .is_some();
        if !open {
            let candidates: Vec<usize> = (0..unlabeled.images.len())
                .filter(|&i| fits(seg, &unlabeled.images[i]))
                .collect();
            if candidates.is_empty() {
                skipped += 1;
                continue;
            }
            groups.push(Group {
                base: candidates[prng.random_range(0..candidates.len())],
                members: Vec::new(),
            });
        }
        let g = groups.last_mut().expect("group just ensured");
        let info = &unlabeled.images[g.base];
        let x = prng.random_range(0..=info.width - seg.crop.width());
        let y = prng.random_range(0..=info.height - seg.crop.height());
        g.members.push((j, (x, y)));
    }

    let mut set = AnnotationSet::new(Vec::new(), lib.categories.clone());
    let mut images = BTreeMap::new();
    let first_image = unlabeled.images.iter().map(|i| i.id).max().map_or(1, |m| m + 1);
    let mut next_ann = 1u64;
    let existing = unlabeled.by_image();
    for (id, g) in (first_image..).zip(groups) {
        let info = &unlabeled.images[g.base];
        let mut canvas = load(info)?;
        for a in existing.get(&info.id).into_iter().flatten() {
            set.annotations.push(Annotation {
                id: next_ann,
                image_id: id,
                ..(*a).clone()
            });
            next_ann += 1;
        }
        for (j, origin) in g.members {
            let seg = segs[j];
            blend_region_in_place(&mut canvas, &seg.crop, origin, cfg.beta)?;
            set.annotations.push(Annotation {
                id: next_ann,
                image_id: id,
                category_id: seg.category_id,
                bbox: PixelRect::new(origin.0, origin.1, seg.crop.width(), seg.crop.height()).to_bbox(),
                score: Some(cfg.synthetic_score),
            });
            next_ann += 1;
        }
        set.images.push(ImageInfo {
            id,
            width: canvas.width(),
            height: canvas.height(),
            file_name: format!("syn_{id:06}.ppm"),
        });
        images.insert(id, canvas);
    }
    Ok(SynthesisOutput { set, images, skipped })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    category_id: u32,
    source_image_id: u64,
    source_bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    categories: Vec<Category>,
    segments: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus one PPM per segment into `dir`.
pub fn save_library(lib: &ForegroundLibrary, dir: impl AsRef<Path>) -> Result<(), CceError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CceError::Manifest(format!("{}: {e}", dir.display())))?;
    let mut entries = Vec::with_capacity(lib.len());
    for (i, seg) in lib.iter().enumerate() {
        let file = format!("seg_{:06}_c{}.ppm", i, seg.category_id);
        save_ppm(&seg.crop, dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            category_id: seg.category_id,
            source_image_id: seg.source_image_id,
            source_bbox: seg.source_bbox,
        });
    }
    let manifest = Manifest {
        categories: lib.categories.clone(),
        segments: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| CceError::Manifest(e.to_string()))
}

pub fn load_library(dir: impl AsRef<Path>) -> Result<ForegroundLibrary, CceError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| CceError::Manifest(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CceError::Manifest(e.to_string()))?;
    let mut segments: BTreeMap<u32, Vec<ForegroundSegment>> = BTreeMap::new();
    for e in manifest.segments {
        if e.category_id == crate::annotations::UNKNOWN_CATEGORY {
            return Err(CceError::Manifest(format!("segment {} has the unknown category", e.file)));
        }
        let crop = load_ppm(dir.join(&e.file))?;
        if crop.width() as f64 != e.source_bbox.w || crop.height() as f64 != e.source_bbox.h {
            return Err(CceError::Manifest(format!("segment {} size differs from its box", e.file)));
        }
        segments.entry(e.category_id).or_default().push(ForegroundSegment {
            crop,
            category_id: e.category_id,
            source_image_id: e.source_image_id,
            source_bbox: e.source_bbox,
        });
    }
    Ok(ForegroundLibrary {
        categories: manifest.categories,
        segments,
    })
}
