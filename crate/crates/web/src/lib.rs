//! WebAssembly bindings for the single-page demo in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ossod_core::annotations::class_frequencies;
use ossod_core::cce::{balance_library, build_library, synthesize, ForegroundLibrary, SynthesisConfig};
use ossod_core::detector::{fit_supervised, predict, DetectorModel, DetectorParams};
use ossod_core::error::CceError;
use ossod_core::fusion::dynamic_threshold;
use ossod_core::raster::RasterImage;
use ossod_core::world::{generate_world, World, WorldConfig};

fn rgba(img: &RasterImage) -> Vec<u8> {
    img.pixels().iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

#[derive(Serialize)]
struct BoxOut {
    bbox: [f64; 4],
    category_id: u32,
    name: String,
    confidence: f64,
}

#[derive(Serialize)]
struct DetectOut {
    truth: Vec<BoxOut>,
    detections: Vec<BoxOut>,
}

#[derive(Serialize)]
struct CompositeOut {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
    boxes: Vec<BoxOut>,
    before: Vec<(u32, usize)>,
    after: Vec<(u32, usize)>,
}

/// T(AP) = clamp(exp(gamma * (AP - 1)), 0, 1) sampled at `points` evenly
/// spaced AP values in [0, 1].
#[wasm_bindgen]
pub fn threshold_curve(gamma: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n)
        .map(|i| dynamic_threshold(i as f64 / (n - 1) as f64, gamma).unwrap_or(f64::NAN))
        .collect()
}

/// A small shape world with a fitted detector.
#[wasm_bindgen]
pub struct Demo {
    world: World,
    model: DetectorModel,
    library: ForegroundLibrary,
}

impl Demo {
    pub fn build(seed: u64, imbalance_ratio: f64) -> Result<Demo, String> {
        let cfg = WorldConfig {
            imbalance_ratio,
            labeled_images: 80,
            unlabeled_images: 12,
            test_images: 24,
            validation_images: 1,
            seed,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).map_err(|e| e.to_string())?;
        let lab = &world.labeled;
        let model = fit_supervised(&lab.truth, &lab.images, &DetectorParams::default()).map_err(|e| e.to_string())?;
        let library = build_library(&lab.truth, |info| {
            lab.images.get(&info.id).cloned().ok_or(CceError::Unloadable {
                image_id: info.id,
                reason: "missing".into(),
            })
        })
        .map_err(|e| e.to_string())?;
        Ok(Demo { world, model, library })
    }

    fn name(&self, id: u32) -> String {
        self.world
            .categories()
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.clone())
            .unwrap_or_default()
    }

    pub fn detections(&self, index: usize, open_set: bool) -> Result<String, String> {
        let info = self.world.test.truth.images.get(index).ok_or("image index out of range")?;
        let img = &self.world.test.images[&info.id];
        let truth = self
            .world
            .test
            .truth
            .annotations
            .iter()
            .filter(|a| a.image_id == info.id)
            .map(|a| BoxOut {
                bbox: a.bbox.to_array(),
                category_id: a.category_id,
                name: self.name(a.category_id),
                confidence: 1.0,
            })
            .collect();
        let detections = predict(&self.model, img, open_set)
            .into_iter()
            .map(|d| BoxOut {
                bbox: d.bbox.to_array(),
                category_id: d.category_id,
                name: self.name(d.category_id),
                confidence: d.confidence,
            })
            .collect();
        Ok(serde_json::to_string(&DetectOut { truth, detections }).expect("detections serialize"))
    }

    pub fn composite_json(&self, beta: f64, seed: u64) -> Result<String, String> {
        let balanced = balance_library(&self.library, seed).map_err(|e| e.to_string())?;
        let unl = &self.world.unlabeled;
        let cfg = SynthesisConfig {
            beta,
            placements_per_image: 4,
            seed,
            ..SynthesisConfig::default()
        };
        let out = synthesize(&balanced, &unl.unlabeled_view(), |info| Ok(unl.images[&info.id].clone()), &cfg)
            .map_err(|e| e.to_string())?;
        let info = out.set.images.first().ok_or("nothing was synthesized")?;
        let img = &out.images[&info.id];
        let boxes = out
            .set
            .annotations
            .iter()
            .filter(|a| a.image_id == info.id)
            .map(|a| BoxOut {
                bbox: a.bbox.to_array(),
                category_id: a.category_id,
                name: self.name(a.category_id),
                confidence: a.score.unwrap_or(1.0),
            })
            .collect();
        let counts = |l: &ForegroundLibrary| l.frequencies().into_iter().collect::<Vec<_>>();
        let res = CompositeOut {
            width: img.width(),
            height: img.height(),
            rgba: rgba(img),
            boxes,
            before: counts(&self.library),
            after: counts(&balanced),
        };
        Ok(serde_json::to_string(&res).expect("composite serializes"))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, imbalance_ratio: f64) -> Result<Demo, JsError> {
        Demo::build(seed as u64, imbalance_ratio).map_err(|e| JsError::new(&e))
    }

    pub fn width(&self) -> u32 {
        self.world.config.width
    }

    pub fn height(&self) -> u32 {
        self.world.config.height
    }

    pub fn test_count(&self) -> usize {
        self.world.test.truth.images.len()
    }

    /// Labelled-split object counts per known class as JSON `{id: count}`.
    pub fn class_counts(&self) -> String {
        serde_json::to_string(&class_frequencies(&self.world.labeled.truth).counts).expect("counts serialize")
    }

    pub fn test_rgba(&self, index: usize) -> Vec<u8> {
        self.world
            .test
            .truth
            .images
            .get(index)
            .map(|i| rgba(&self.world.test.images[&i.id]))
            .unwrap_or_default()
    }

    pub fn detect(&self, index: usize, open_set: bool) -> Result<String, JsError> {
        self.detections(index, open_set).map_err(|e| JsError::new(&e))
    }

    /// Balances the foreground library and blends it into an unlabeled image.
    pub fn composite(&self, beta: f64, seed: u32) -> Result<String, JsError> {
        self.composite_json(beta, seed as u64).map_err(|e| JsError::new(&e))
    }
}
