use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box has non-finite coordinates")]
    NonFinite,
    #[error("box must have positive extent, got w={w} h={h}")]
    EmptyBox { w: f64, h: f64 },
}

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("pixel buffer holds {found} pixels, expected {expected}")]
    PixelCount { expected: usize, found: usize },
    #[error("region {w}x{h} at ({x},{y}) does not fit in {width}x{height} image")]
    OutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("blend weight {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("invalid augmentation: {0}")]
    InvalidAugmentation(String),
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PPM maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated PPM payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON syntax error: {0}")]
    Syntax(#[source] serde_json::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("annotation {annotation} references missing {kind} id {id}")]
    DanglingId {
        annotation: u64,
        kind: &'static str,
        id: u64,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("annotation {0} has no score")]
    MissingScore(u64),
    #[error("category tables differ: {0}")]
    CategoryMismatch(String),
    #[error("image tables conflict at image id {0}")]
    ImageConflict(u64),
    #[error("confidence threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("category tables differ: {0}")]
    CategoryMismatch(String),
    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidIouThreshold(f64),
    #[error("category {0} is not a known category")]
    NotKnown(u32),
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("AP value {0} outside [0, 1]")]
    ApOutOfRange(f64),
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("no AP entry for category {0}")]
    MissingCategory(u32),
    #[error("category tables differ: {0}")]
    CategoryMismatch(String),
    #[error("unknown-detection set contains category {category} (annotation {annotation})")]
    NonUnknownCategory { annotation: u64, category: u32 },
    #[error("known-detection set contains the unknown category (annotation {0})")]
    UnknownInKnownSet(u64),
    #[error("detection {0} has no score")]
    MissingScore(u64),
    #[error("detection {annotation} references image {image} absent from the known set")]
    ImageMismatch { annotation: u64, image: u64 },
}

#[derive(Debug, Error)]
pub enum CceError {
    #[error("failed to load image {image_id}: {reason}")]
    Unloadable { image_id: u64, reason: String },
    #[error("annotation {annotation} box exceeds image {image_id} bounds")]
    BoxOutOfBounds { annotation: u64, image_id: u64 },
    #[error("foreground library is empty")]
    EmptyLibrary,
    #[error("image {image_id} is {found_w}x{found_h}, annotation table says {want_w}x{want_h}")]
    SizeMismatch {
        image_id: u64,
        want_w: u32,
        want_h: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("library manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

#[derive(Debug, Error, PartialEq)]
pub enum EmaError {
    #[error("decay {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("parameter vector contains a non-finite entry at {0}")]
    NonFinite(usize),
    #[error("layout mismatch: state is {state:?} (len {state_len}), student is {student:?} (len {student_len})")]
    LayoutMismatch {
        state: String,
        state_len: usize,
        student: String,
        student_len: usize,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("could not place {objects} objects in image {image} after {attempts} attempts")]
    InfeasiblePacking {
        image: u64,
        objects: usize,
        attempts: usize,
    },
    #[error("known category {0} has no training examples")]
    EmptyClass(u32),
    #[error("invalid detector model: {0}")]
    InvalidModel(String),
    #[error("image {0} missing from the image store")]
    MissingImage(u64),
    #[error(transparent)]
    Ema(#[from] EmaError),
}

/// Crate-level error wrapping every module error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Cce(#[from] CceError),
    #[error(transparent)]
    Ema(#[from] EmaError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short category tag used by the CLI for exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::Raster(_) => "raster",
            Error::Annotation(_) => "annotations",
            Error::Metrics(_) => "metrics",
            Error::Fusion(_) => "fusion",
            Error::Cce(_) => "cce",
            Error::Ema(_) => "ema",
            Error::World(_) => "world",
            Error::Config(_) => "config",
            Error::Iteration { source, .. } => source.category(),
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
