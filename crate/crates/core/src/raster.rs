//! 8-bit RGB raster images, binary PPM I/O, region blending and the
//! weak/strong augmentations used on unlabeled images.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::RasterError;
use crate::geometry::BBox;
use crate::seed::stream_rng;

pub type Rgb = [u8; 3];

/// Row-major RGB image with positive dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn to_bbox(self) -> BBox {
        BBox {
            x: self.x as f64,
            y: self.y as f64,
            w: self.w as f64,
            h: self.h as f64,
        }
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RasterError::PixelCount {
                expected,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Result<Self, RasterError> {
        Self::new(width, height, vec![color; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: Rgb) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    fn check_region(&self, r: PixelRect) -> Result<(), RasterError> {
        let fits = r.w > 0
            && r.h > 0
            && r.x as u64 + r.w as u64 <= self.width as u64
            && r.y as u64 + r.h as u64 <= self.height as u64;
        if fits {
            Ok(())
        } else {
            Err(RasterError::OutOfBounds {
                x: r.x,
                y: r.y,
                w: r.w,
                h: r.h,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn crop(&self, r: PixelRect) -> Result<RasterImage, RasterError> {
        self.check_region(r)?;
        let mut out = Vec::with_capacity(r.w as usize * r.h as usize);
        for y in r.y..r.y + r.h {
            let row = y as usize * self.width as usize;
            out.extend_from_slice(&self.pixels[row + r.x as usize..row + (r.x + r.w) as usize]);
        }
        RasterImage::new(r.w, r.h, out)
    }

    pub fn flip_horizontal(&self) -> RasterImage {
        let w = self.width as usize;
        let mut out = self.pixels.clone();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        RasterImage {
            width: self.width,
            height: self.height,
            pixels: out,
        }
    }

    /// Encodes as binary PPM: `P6\n<w> <h>\n255\n` followed by raw triples.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len() * 3);
        out.extend_from_slice(header.as_bytes());
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<RasterImage, RasterError> {
        let mut cur = HeaderCursor { bytes, pos: 0 };
        let magic = cur.token()?;
        if magic != b"P6" {
            return Err(RasterError::MalformedHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let width = cur.number("width")?;
        let height = cur.number("height")?;
        let maxval = cur.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(RasterError::MalformedHeader(format!(
                "zero dimension {width}x{height}"
            )));
        }
        if maxval != 255 {
            return Err(RasterError::UnsupportedMaxval(maxval));
        }
        // exactly one whitespace byte separates maxval from the payload
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => {
                return Err(RasterError::MalformedHeader(
                    "missing whitespace after maxval".into(),
                ))
            }
        }
        let payload = &bytes[cur.pos..];
        let expected = width as usize * height as usize * 3;
        if payload.len() < expected {
            return Err(RasterError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let pixels = payload[..expected]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        RasterImage::new(width, height, pixels)
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], RasterError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(RasterError::MalformedHeader("unexpected end of header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u32, RasterError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                RasterError::MalformedHeader(format!(
                    "bad {what} {:?}",
                    String::from_utf8_lossy(tok)
                ))
            })
    }
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<RasterImage, RasterError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RasterImage::from_ppm_bytes(&bytes)
}

pub fn save_ppm(img: &RasterImage, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    fs::write(path, img.to_ppm_bytes()).map_err(|source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Blends `fg` into `bg` at `origin`: `beta * fg + (1 - beta) * bg`, rounded to
/// nearest with ties away from zero. Pixels outside the pasted rectangle are
/// copied from `bg`.
pub fn blend_region(
    bg: &RasterImage,
    fg: &RasterImage,
    origin: (u32, u32),
    beta: f64,
) -> Result<RasterImage, RasterError> {
    let mut out = bg.clone();
    blend_region_in_place(&mut out, fg, origin, beta)?;
    Ok(out)
}

pub fn blend_region_in_place(
    bg: &mut RasterImage,
    fg: &RasterImage,
    origin: (u32, u32),
    beta: f64,
) -> Result<(), RasterError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(RasterError::InvalidBeta(beta));
    }
    bg.check_region(PixelRect::new(origin.0, origin.1, fg.width, fg.height))?;
    for fy in 0..fg.height {
        for fx in 0..fg.width {
            let f = fg.get(fx, fy);
            let (x, y) = (origin.0 + fx, origin.1 + fy);
            let b = bg.get(x, y);
            let mut v = [0u8; 3];
            for c in 0..3 {
                v[c] = blend_channel(f[c], b[c], beta);
            }
            bg.set(x, y, v);
        }
    }
    Ok(())
}

#[inline]
pub fn blend_channel(fg: u8, bg: u8, beta: f64) -> u8 {
    let v = beta * fg as f64 + (1.0 - beta) * bg as f64;
    v.round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub flip: bool,
    pub jitter_scale: [f64; 3],
    pub cutout: Option<PixelRect>,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self::weak(false, 0)
    }

    pub fn weak(flip: bool, seed: u64) -> Self {
        Self {
            kind: AugmentationKind::Weak,
            flip,
            jitter_scale: [1.0; 3],
            cutout: None,
            seed,
        }
    }

    /// Weak view: random horizontal flip.
    pub fn sample_weak(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x5745_414b);
        Self::weak(rng.random_bool(0.5), seed)
    }

    /// Strong view: random flip, per-channel colour jitter and one cutout
    /// rectangle covering up to a quarter of each side.
    pub fn sample_strong(seed: u64, width: u32, height: u32) -> Self {
        let mut rng = stream_rng(seed, 0x5354_524f);
        let flip = rng.random_bool(0.5);
        let mut jitter_scale = [1.0; 3];
        for s in &mut jitter_scale {
            *s = rng.random_range(0.75..=1.25);
        }
        let cw = (width / 4).max(1);
        let ch = (height / 4).max(1);
        let w = rng.random_range(1..=cw);
        let h = rng.random_range(1..=ch);
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        Self {
            kind: AugmentationKind::Strong,
            flip,
            jitter_scale,
            cutout: Some(PixelRect::new(x, y, w, h)),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        for s in self.jitter_scale {
            if !(0.5..=1.5).contains(&s) {
                return Err(RasterError::InvalidAugmentation(format!(
                    "jitter scale {s} outside [0.5, 1.5]"
                )));
            }
        }
        if self.kind == AugmentationKind::Weak
            && (self.jitter_scale != [1.0; 3] || self.cutout.is_some())
        {
            return Err(RasterError::InvalidAugmentation(
                "weak augmentation admits only a flip".into(),
            ));
        }
        Ok(())
    }
}

/// Maps boxes between original and augmented image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateMap {
    pub width: f64,
    pub flipped: bool,
}

impl CoordinateMap {
    pub fn identity(width: u32) -> Self {
        Self {
            width: width as f64,
            flipped: false,
        }
    }

    pub fn forward(&self, b: BBox) -> BBox {
        if self.flipped {
            BBox {
                x: self.width - b.x - b.w,
                ..b
            }
        } else {
            b
        }
    }

    /// Reflection is its own inverse.
    pub fn inverse(&self, b: BBox) -> BBox {
        self.forward(b)
    }
}

/// Cutout fill colour.
pub const CUTOUT_FILL: Rgb = [0, 0, 0];

pub fn apply_augmentation(
    img: &RasterImage,
    spec: &AugmentationSpec,
) -> Result<(RasterImage, CoordinateMap), RasterError> {
    spec.validate()?;
    let mut out = if spec.flip {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    if spec.jitter_scale != [1.0; 3] {
        for p in out.pixels_mut() {
            for (v, s) in p.iter_mut().zip(spec.jitter_scale) {
                *v = (*v as f64 * s).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    if let Some(r) = spec.cutout {
        out.check_region(r)
            .map_err(|_| RasterError::InvalidAugmentation("cutout outside image".into()))?;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                out.set(x, y, CUTOUT_FILL);
            }
        }
    }
    Ok((
        out,
        CoordinateMap {
            width: img.width as f64,
            flipped: spec.flip,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = RasterImage> {
        (1u32..9, 1u32..9).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<[u8; 3]>(), (w * h) as usize)
                .prop_map(move |px| RasterImage::new(w, h, px).unwrap())
        })
    }

    #[test]
    fn ppm_single_black_pixel() {
        let img = RasterImage::new(1, 1, vec![[0, 0, 0]]).unwrap();
        let back = RasterImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_preserves_pixel_order() {
        let bytes = b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00";
        let img = RasterImage::from_ppm_bytes(bytes).unwrap();
        assert_eq!(img.pixels(), &[[255, 0, 0], [0, 255, 0]]);
    }

    #[test]
    fn ppm_white_pixel_byte_layout() {
        // header bytes: P 6 \n 1 ' ' 1 \n 2 5 5 \n = 11, plus 3 payload bytes
        let img = RasterImage::filled(1, 1, [255, 255, 255]).unwrap();
        let bytes = img.to_ppm_bytes();
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[11..], &[0xff, 0xff, 0xff]);
    }

    #[test]
    fn ppm_errors_are_distinct() {
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P6\n2 2\n255\n\0\0\0\0\0\0\0\0\0"),
            Err(RasterError::TruncatedPayload {
                expected: 12,
                found: 9
            })
        ));
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(RasterError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P3\n1 1\n255\n0 0 0"),
            Err(RasterError::MalformedHeader(_))
        ));
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P6\n1"),
            Err(RasterError::MalformedHeader(_))
        ));
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let img = RasterImage::from_ppm_bytes(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(matches!(
            RasterImage::new(0, 3, vec![]),
            Err(RasterError::ZeroDimension { .. })
        ));
    }

    #[test]
    fn ppm_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = RasterImage::new(3, 2, (0..6u8).map(|i| [i, i * 2, 255 - i]).collect()).unwrap();
        save_ppm(&img, &path).unwrap();
        assert_eq!(load_ppm(&path).unwrap(), img);
        assert!(matches!(
            load_ppm(dir.path().join("missing.ppm")),
            Err(RasterError::Io { .. })
        ));
    }

    #[test]
    fn blend_examples() {
        assert_eq!(blend_channel(200, 100, 0.5), 150);
        assert_eq!(blend_channel(255, 0, 0.5), 128);
        let bg = RasterImage::filled(4, 4, [100, 100, 100]).unwrap();
        let fg = RasterImage::filled(2, 2, [200, 10, 255]).unwrap();
        let out = blend_region(&bg, &fg, (1, 1), 1.0).unwrap();
        assert_eq!(out.get(1, 1), [200, 10, 255]);
        assert_eq!(out.get(2, 2), [200, 10, 255]);
        assert_eq!(out.get(0, 0), [100, 100, 100]);
        assert_eq!(out.get(3, 3), [100, 100, 100]);
        assert!(matches!(
            blend_region(&bg, &fg, (3, 0), 0.5),
            Err(RasterError::OutOfBounds { .. })
        ));
        assert!(matches!(
            blend_region(&bg, &fg, (0, 0), 1.5),
            Err(RasterError::InvalidBeta(_))
        ));
    }

    #[test]
    fn flip_maps_boxes() {
        let img = RasterImage::filled(4, 1, [0, 0, 0]).unwrap();
        let (_, map) = apply_augmentation(&img, &AugmentationSpec::weak(true, 0)).unwrap();
        let b = map.forward(BBox::new(0.0, 0.0, 2.0, 1.0).unwrap());
        assert_eq!(b.x, 2.0);
        assert_eq!(b.w, 2.0);
    }

    #[test]
    fn weak_without_flip_is_identity() {
        let img = RasterImage::new(2, 1, vec![[1, 2, 3], [4, 5, 6]]).unwrap();
        let (out, map) = apply_augmentation(&img, &AugmentationSpec::weak(false, 9)).unwrap();
        assert_eq!(out, img);
        let b = BBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(map.forward(b), b);
    }

    #[test]
    fn invalid_specs_rejected() {
        let img = RasterImage::filled(4, 4, [9, 9, 9]).unwrap();
        let mut s = AugmentationSpec::weak(false, 0);
        s.jitter_scale = [1.2, 1.0, 1.0];
        assert!(apply_augmentation(&img, &s).is_err());
        let mut s = AugmentationSpec::sample_strong(1, 4, 4);
        s.cutout = Some(PixelRect::new(3, 3, 2, 2));
        assert!(apply_augmentation(&img, &s).is_err());
        s.cutout = None;
        s.jitter_scale = [0.4, 1.0, 1.0];
        assert!(apply_augmentation(&img, &s).is_err());
    }

    #[test]
    fn strong_cutout_is_black() {
        let img = RasterImage::filled(16, 16, [90, 90, 90]).unwrap();
        let spec = AugmentationSpec::sample_strong(7, 16, 16);
        let (out, _) = apply_augmentation(&img, &spec).unwrap();
        let r = spec.cutout.unwrap();
        assert_eq!(out.get(r.x, r.y), CUTOUT_FILL);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(img in arb_image()) {
            let back = RasterImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn blend_endpoints(img in arb_image(), fgc in any::<[u8; 3]>()) {
            let fg = RasterImage::filled(1, 1, fgc).unwrap();
            prop_assert_eq!(blend_region(&img, &fg, (0, 0), 0.0).unwrap(), img.clone());
            let full = blend_region(&img, &fg, (0, 0), 1.0).unwrap();
            prop_assert_eq!(full.get(0, 0), fgc);
        }

        #[test]
        fn flip_is_involution(img in arb_image(), x in 0u32..4, w in 1u32..4, seed in any::<u64>()) {
            let spec = AugmentationSpec::weak(true, seed);
            let (once, map) = apply_augmentation(&img, &spec).unwrap();
            let (twice, _) = apply_augmentation(&once, &spec).unwrap();
            prop_assert_eq!(twice, img);
            let b = BBox::new(x as f64, 0.0, w as f64, 1.0).unwrap();
            prop_assert_eq!(map.inverse(map.forward(b)), b);
        }

        #[test]
        fn strong_is_deterministic(img in arb_image(), seed in any::<u64>()) {
            let a = AugmentationSpec::sample_strong(seed, img.width(), img.height());
            let b = AugmentationSpec::sample_strong(seed, img.width(), img.height());
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(apply_augmentation(&img, &a).unwrap().0, apply_augmentation(&img, &b).unwrap().0);
        }
    }
}
