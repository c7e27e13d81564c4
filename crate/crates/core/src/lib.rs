//! Online RGB-D mapping that fuses depth into an octree TSDF grid while
//! growing and optimizing a compact 3D Gaussian splat map on the fly.
//!
//! The per-frame loop is: fuse depth ([`tsdf`]), segment the RGB image by
//! contrast ([`quadtree`]), seed new splats at quadrant centers gated by
//! voxel weight ([`gaussians`]), then run a few photometric optimization
//! iterations against the input image ([`optimizer`], [`renderer`]). After
//! scanning, a global optimization pass over the keyframe list sharpens the
//! result. [`pipeline`] ties the stages together; [`dataset`], [`metrics`]
//! and [`export`] cover ingestion, evaluation and on-disk formats.

pub mod dataset;
pub mod export;
pub mod gaussians;
pub mod geometry;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod quadtree;
pub mod renderer;
pub mod sh;
pub mod tsdf;

pub use geometry::{Intrinsics, Pose};
pub use pipeline::{Mapper, PipelineConfig, RunStats};
