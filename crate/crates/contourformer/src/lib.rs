//! Contour-based instance segmentation with sub-contour query decoupling,
//! box-restricted deformable cross-attention, and residual fine-grained
//! contour distribution refinement, plus a synthetic-data training harness,
//! COCO-format ingestion, and polygon-AP evaluation.

pub mod assignment;
pub mod cfdr;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod train;

pub use error::{Error, Result};
