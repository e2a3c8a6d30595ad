pub mod annotations;
pub mod ema;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod raster;
pub mod seed;
pub mod cce;
pub mod detector;
pub mod world;
