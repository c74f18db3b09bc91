//! Pipeline configuration as one JSON document.
//!
//! Every section falls back to its defaults, so a config file only needs the
//! keys it changes. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{ProjectionLut, DEFAULT_IMAGE_SIZE};
use crate::circle_fit::RansacConfig;
use crate::cone::ConeParams;
use crate::error::{Error, Result};
use crate::frst::FrstConfig;
use crate::geometry::{UnitVec3, Vec3};
use crate::nms::NmsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Sensor height above the ground contact plane (m).
    pub mount_height: f64,
    /// Ground normal in the geographic frame.
    pub ground_normal: [f64; 3],
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            mount_height: 1.3,
            ground_normal: [0.0, 0.0, 1.0],
        }
    }
}

impl SensorConfig {
    pub fn ground_normal(&self) -> Result<UnitVec3> {
        let [x, y, z] = self.ground_normal;
        UnitVec3::normalize(Vec3::new(x, y, z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub lut: ProjectionLut,
    pub image_size: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            lut: ProjectionLut::default(),
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    /// Minimum void area as a fraction of the smallest hole's pixel area.
    pub min_area_factor: f64,
    /// Void centroids farther than this fraction of the image width from the
    /// centre are ignored.
    pub centrality_fraction: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            min_area_factor: 0.5,
            centrality_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineConfig {
    /// The fine stage runs when the cone is at most this far away (m).
    pub activation_distance: f64,
    pub frst: FrstConfig,
    /// FRST radii span the physical radius range widened by this fraction.
    pub radius_spread: f64,
    pub radius_steps: usize,
    /// Widening of the pixel radius gate around the physical range.
    pub radius_gate_margin: f64,
    pub ransac: RansacConfig,
    pub nms: NmsConfig,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            activation_distance: 1.0,
            frst: FrstConfig::default(),
            radius_spread: 0.2,
            radius_steps: 5,
            radius_gate_margin: 0.25,
            ransac: RansacConfig::default(),
            nms: NmsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// The dense LiDAR is used at or inside this distance (m).
    pub dense_lidar_distance: f64,
    pub hysteresis: f64,
    /// Frames without a cone before the track is declared lost.
    pub lost_frames: usize,
    /// A tracked cone may move at most this far between frames (m).
    pub gate: f64,
    /// Cones extracted per frame for target matching.
    pub max_cones: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            dense_lidar_distance: 3.0,
            hysteresis: 0.2,
            lost_frames: 5,
            gate: 1.5,
            max_cones: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sensor: SensorConfig,
    pub cone: ConeParams,
    pub projection: ProjectionConfig,
    /// Physical hole diameters expected on the bench (m).
    pub hole_diameter_range: HoleRange,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub tracking: TrackingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoleRange {
    pub min: f64,
    pub max: f64,
    /// Relative tolerance on a fine-stage radius before it is rejected.
    pub tolerance: f64,
}

impl Default for HoleRange {
    fn default() -> Self {
        HoleRange {
            min: 0.24,
            max: 0.30,
            tolerance: 0.15,
        }
    }
}

impl HoleRange {
    /// Accepted physical radius interval (m).
    pub fn radius_bounds(&self) -> (f64, f64) {
        (self.min / 2.0 * (1.0 - self.tolerance), self.max / 2.0 * (1.0 + self.tolerance))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensor.mount_height > 0.0) {
            return Err(Error::Config("mount height must be positive".into()));
        }
        self.sensor.ground_normal()?;
        self.cone.validate()?;
        self.projection.lut.validate()?;
        if self.projection.image_size < 16 {
            return Err(Error::Config("image size must be at least 16 px".into()));
        }
        let h = &self.hole_diameter_range;
        if !(h.min > 0.0 && h.min <= h.max && (0.0..1.0).contains(&h.tolerance)) {
            return Err(Error::Config("hole diameter range must satisfy 0 < min <= max".into()));
        }
        let c = &self.coarse;
        if !(c.min_area_factor > 0.0 && c.centrality_fraction > 0.0) {
            return Err(Error::Config("coarse factors must be positive".into()));
        }
        let f = &self.fine;
        if !(f.activation_distance >= 0.0 && f.radius_steps >= 1) {
            return Err(Error::Config("fine stage distance and radius steps must be positive".into()));
        }
        if !((0.0..1.0).contains(&f.radius_spread) && (0.0..1.0).contains(&f.radius_gate_margin)) {
            return Err(Error::Config("fine-stage margins must lie in [0, 1)".into()));
        }
        // Radii are recomputed per frame; validate everything else.
        FrstConfig { radii: vec![1.0], ..f.frst.clone() }.validate()?;
        f.ransac.validate()?;
        f.nms.validate()?;
        let t = &self.tracking;
        if !(t.dense_lidar_distance > 0.0 && t.hysteresis >= 0.0 && t.gate > 0.0 && t.max_cones >= 1) {
            return Err(Error::Config("LiDAR switch distance must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.fine.activation_distance, 1.0);
        assert_eq!(cfg.tracking.lost_frames, 5);
        assert_eq!(cfg.projection.lut.rows.len(), 5);
    }

    #[test]
    fn round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_override() {
        let cfg = PipelineConfig::from_json(r#"{"fine": {"ransac": {"rng_seed": 9}}}"#).unwrap();
        assert_eq!(cfg.fine.ransac.rng_seed, 9);
        assert_eq!(cfg.fine.ransac.max_retries, 200);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"fine": {"nms": {"alpha3": 1}}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_json(r#"{"hole_diameter_range": {"min": 0.3, "max": 0.2}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"sensor": {"ground_normal": [0, 0, 0]}}"#).is_err());
    }
}
