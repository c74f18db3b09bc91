//! LiDAR blast-hole perception.
//!
//! Point clouds are levelled into a shadow frame, the drill-waste cone is
//! extracted, and a virtual downward camera renders it into a depth image in
//! which the hole is found coarse-to-fine.

pub mod camera;
pub mod circle_fit;
pub mod cloud;
pub mod cone;
pub mod config;
pub mod error;
pub mod frst;
pub mod geometry;
pub mod hull;
pub mod nms;
pub mod pipeline;
pub mod pgm;
pub mod raster;

pub use error::{Error, Result};
