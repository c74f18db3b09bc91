//! Synthetic ground truth for the detection pipeline and a mission simulator.

pub mod bench;
pub mod lidar;
pub mod mission;
pub mod scene;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    Spec(String),
    #[error("pipeline failed: {0}")]
    Pipeline(String),
}
