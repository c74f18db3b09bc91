//! Downward-looking virtual pinhole camera and its distance-adaptive settings.
//!
//! The camera sits `z_cam` above a projection point with its optical axis
//! pointing straight down. Camera axes: `x_c` along shadow `+x`, `y_c` along
//! shadow `-y`, `z_c` along shadow `-z`. Pixel `(u, v)` covers
//! `[u, u + 1) × [v, v + 1)` in continuous image coordinates.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, RotationMatrix, Vec3};
use crate::pgm;

pub const DEFAULT_IMAGE_SIZE: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSettings {
    /// Height above the projection point (m).
    pub z_cam: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels, `(width / 2) / tan(fov / 2)`.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraSettings {
    pub fn new(z_cam: f64, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!("field of view {fov_deg} outside (0, 180)")));
        }
        if !(z_cam > 0.0 && z_cam.is_finite()) {
            return Err(Error::Config(format!("camera height {z_cam} must be positive")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image must be non-empty".into()));
        }
        let focal = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Ok(CameraSettings {
            z_cam,
            fov_deg,
            width,
            height,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        })
    }

    /// Metres per pixel at camera depth `depth`.
    pub fn footprint_at(&self, depth: f64) -> f64 {
        depth / self.focal
    }

    /// Camera-to-shadow pose for a camera above `ground_point`.
    pub fn pose_above(&self, ground_point: &Vec3) -> RigidTransform {
        let flip = RotationMatrix::new(nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)))
            .expect("diag(1,-1,-1) is a rotation");
        RigidTransform::new(flip, ground_point + Vec3::new(0.0, 0.0, self.z_cam))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Square structuring element side (odd, px).
    pub morph_kernel: usize,
    /// Gaussian kernel side (odd, px).
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    /// Support level above which a blurred pixel counts as material.
    pub binary_threshold: f64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.morph_kernel.is_multiple_of(2) || self.blur_kernel.is_multiple_of(2) {
            return Err(Error::Config("filter kernels must be odd".into()));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::Config("blur sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.binary_threshold) {
            return Err(Error::Config("binary threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LutRow {
    pub distance: f64,
    pub z_cam: f64,
    pub fov_deg: f64,
    pub filter: FilterConfig,
}

/// Camera settings against cone distance, ascending in distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectionLut {
    pub rows: Vec<LutRow>,
}

impl Default for ProjectionLut {
    fn default() -> Self {
        let row = |distance, z_cam, fov_deg, morph_kernel, blur_kernel, blur_sigma| LutRow {
            distance,
            z_cam,
            fov_deg,
            filter: FilterConfig {
                morph_kernel,
                blur_kernel,
                blur_sigma,
                binary_threshold: 0.5,
            },
        };
        ProjectionLut {
            rows: vec![
                row(0.2, 1.3, 71.0, 7, 5, 1.0),
                row(0.6, 1.6, 84.0, 7, 5, 1.0),
                row(1.6, 1.8, 96.0, 9, 7, 1.5),
                row(2.2, 2.2, 102.0, 11, 7, 1.5),
                row(3.2, 2.5, 102.0, 13, 9, 2.0),
            ],
        }
    }
}

impl ProjectionLut {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("projection look-up table is empty".into()));
        }
        for w in self.rows.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if !(a.distance < b.distance) {
                return Err(Error::Config("LUT distances must be strictly increasing".into()));
            }
            if b.z_cam < a.z_cam
                || b.filter.morph_kernel < a.filter.morph_kernel
                || b.filter.blur_kernel < a.filter.blur_kernel
            {
                return Err(Error::Config(
                    "LUT camera heights and kernel sizes must not decrease with distance".into(),
                ));
            }
        }
        for r in &self.rows {
            r.filter.validate()?;
            CameraSettings::new(r.z_cam, r.fov_deg, 1, 1)?;
        }
        Ok(())
    }

    /// Row values interpolated at `distance`, clamped to the table ends.
    pub fn lookup(&self, distance: f64) -> Result<LutRow> {
        let rows = &self.rows;
        let first = rows.first().ok_or_else(|| Error::Config("empty LUT".into()))?;
        let last = rows.last().unwrap();
        if distance <= first.distance {
            return Ok(LutRow { distance, ..*first });
        }
        if distance >= last.distance {
            return Ok(LutRow { distance, ..*last });
        }
        let i = rows.iter().rposition(|r| r.distance <= distance).unwrap();
        let (a, b) = (&rows[i], &rows[i + 1]);
        let t = (distance - a.distance) / (b.distance - a.distance);
        let lerp = |x: f64, y: f64| x + t * (y - x);
        let odd = |x: usize, y: usize| {
            let k = lerp(x as f64, y as f64).round() as usize;
            if k.is_multiple_of(2) {
                k + 1
            } else {
                k
            }
            .clamp(x.min(y), x.max(y))
        };
        Ok(LutRow {
            distance,
            z_cam: lerp(a.z_cam, b.z_cam),
            fov_deg: lerp(a.fov_deg, b.fov_deg),
            filter: FilterConfig {
                morph_kernel: odd(a.filter.morph_kernel, b.filter.morph_kernel),
                blur_kernel: odd(a.filter.blur_kernel, b.filter.blur_kernel),
                blur_sigma: lerp(a.filter.blur_sigma, b.filter.blur_sigma),
                binary_threshold: lerp(a.filter.binary_threshold, b.filter.binary_threshold),
            },
        })
    }
}

/// Camera-height factor for cone height `h`:
/// `max(1 - 0.9 / (1 + exp(6.25 h - 2.88)), 0.6)`.
pub fn height_scale_factor(h: f64) -> f64 {
    (1.0 - 0.9 / (1.0 + (6.25 * h - 2.88).exp())).max(0.6)
}

pub fn scale_camera_height(z_cam: f64, h: f64) -> f64 {
    z_cam * height_scale_factor(h)
}

/// Settings for a cone at `distance` (m) with height `cone_height` (m).
pub fn settings_for(
    distance: f64,
    cone_height: f64,
    lut: &ProjectionLut,
    image_size: (usize, usize),
) -> Result<(CameraSettings, FilterConfig)> {
    if !(distance >= 0.0) {
        return Err(Error::InvalidInput(format!("distance {distance} must be non-negative")));
    }
    let row = lut.lookup(distance)?;
    let z = scale_camera_height(row.z_cam, cone_height.max(0.0));
    let cam = CameraSettings::new(z, row.fov_deg, image_size.0, image_size.1)?;
    Ok((cam, row.filter))
}

/// Sentinel stored in invalid pixels.
pub const INVALID_DEPTH: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Camera-frame depth (m), row-major; [`INVALID_DEPTH`] where invalid.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub settings: CameraSettings,
    pub camera_pose: RigidTransform,
}

impl DepthImage {
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let i = self.index(u, v);
        self.valid[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// 16-bit PGM, depth quantized at 1 mm; invalid pixels are 0.
    pub fn write_pgm(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let data: Vec<u16> = self
            .depth
            .iter()
            .zip(&self.valid)
            .map(|(d, ok)| if *ok { (d * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 })
            .collect();
        let s = &self.settings;
        let t = self.camera_pose.translation;
        let comments = vec![
            "depth unit=mm invalid=0".to_string(),
            format!(
                "z_cam={} fov_deg={} focal={} cx={} cy={}",
                s.z_cam, s.fov_deg, s.focal, s.cx, s.cy
            ),
            format!("camera_position={} {} {}", t.x, t.y, t.z),
        ];
        pgm::write_pgm16(path, self.width, self.height, &data, &comments)
    }
}

/// Continuous pixel coordinates and depth of `p`, if it lies in front of the camera.
pub fn project_point(settings: &CameraSettings, pose: &RigidTransform, p: &Vec3) -> Option<(f64, f64, f64)> {
    let c = pose.inverse().apply(p);
    if !(c.z > 0.0) {
        return None;
    }
    Some((
        settings.cx + settings.focal * c.x / c.z,
        settings.cy + settings.focal * c.y / c.z,
        c.z,
    ))
}

/// Z-buffered projection keeping the smallest depth per pixel.
///
/// Ties keep the first point written, so the output is a function of the
/// cloud order alone.
pub fn project(cloud: &PointCloud, ground_point: &Vec3, settings: &CameraSettings) -> DepthImage {
    let pose = settings.pose_above(ground_point);
    let (w, h) = (settings.width, settings.height);
    let mut depth = vec![f64::INFINITY; w * h];
    // Inline the inverse: rotation is diag(1,-1,-1).
    let origin = pose.translation;
    for p in &cloud.points {
        let (xc, yc, zc) = (p.x - origin.x, -(p.y - origin.y), -(p.z - origin.z));
        if !(zc > 0.0) {
            continue;
        }
        let u = settings.cx + settings.focal * xc / zc;
        let v = settings.cy + settings.focal * yc / zc;
        if !(u >= 0.0 && v >= 0.0) {
            continue;
        }
        let (iu, iv) = (u.floor() as usize, v.floor() as usize);
        if iu >= w || iv >= h {
            continue;
        }
        let i = iv * w + iu;
        if zc < depth[i] {
            depth[i] = zc;
        }
    }
    let valid: Vec<bool> = depth.iter().map(|d| d.is_finite()).collect();
    for d in depth.iter_mut() {
        if !d.is_finite() {
            *d = INVALID_DEPTH;
        }
    }
    DepthImage {
        width: w,
        height: h,
        depth,
        valid,
        settings: *settings,
        camera_pose: pose,
    }
}

/// Inverse pinhole at continuous pixel `(u, v)` and `depth`, into the shadow frame.
pub fn back_project(
    pixel: (f64, f64),
    depth: f64,
    settings: &CameraSettings,
    camera_pose: &RigidTransform,
) -> Result<Vec3> {
    let (u, v) = pixel;
    if !(u >= 0.0 && v >= 0.0 && u <= settings.width as f64 && v <= settings.height as f64) {
        return Err(Error::InvalidPixel(u.max(0.0) as usize, v.max(0.0) as usize));
    }
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidInput(format!("depth {depth} must be positive")));
    }
    let c = Vec3::new(
        (u - settings.cx) * depth / settings.focal,
        (v - settings.cy) * depth / settings.focal,
        depth,
    );
    Ok(camera_pose.apply(&c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Frame;
    use proptest::prelude::*;

    fn cam(z: f64, fov: f64) -> CameraSettings {
        CameraSettings::new(z, fov, 400, 400).unwrap()
    }

    #[test]
    fn lut_matches_reference_samples() {
        let lut = ProjectionLut::default();
        lut.validate().unwrap();
        let r = lut.lookup(3.2).unwrap();
        assert_eq!((r.z_cam, r.fov_deg), (2.5, 102.0));
        let r = lut.lookup(0.2).unwrap();
        assert_eq!((r.z_cam, r.fov_deg), (1.3, 71.0));
        let r = lut.lookup(10.0).unwrap();
        assert_eq!((r.z_cam, r.fov_deg), (2.5, 102.0));
        assert_eq!(r.filter, lut.rows.last().unwrap().filter);
    }

    #[test]
    fn lut_interpolates_between_rows() {
        let r = ProjectionLut::default().lookup(1.9).unwrap();
        assert!((r.z_cam - 2.0).abs() < 1e-12);
        assert!((r.fov_deg - 99.0).abs() < 1e-12);
        assert!(r.filter.morph_kernel % 2 == 1);
    }

    #[test]
    fn empty_lut_is_config_error() {
        let lut = ProjectionLut { rows: vec![] };
        assert!(matches!(settings_for(1.0, 0.5, &lut, (400, 400)), Err(Error::Config(_))));
        assert!(lut.validate().is_err());
    }

    #[test]
    fn height_factor_values() {
        // Raw value at h = 0 is 1 - 0.9 / (1 + e^-2.88) = 0.1478, clamped.
        let raw0 = 1.0 - 0.9 / (1.0 + (-2.88f64).exp());
        assert!((raw0 - 0.1478).abs() < 1e-4);
        assert_eq!(height_scale_factor(0.0), 0.6);
        assert!((height_scale_factor(1.0) - 0.9701).abs() < 1e-4);
        assert!(height_scale_factor(3.0) < 1.0);
        assert!(1.0 - height_scale_factor(50.0) < 1e-12);
    }

    proptest! {
        #[test]
        fn height_factor_monotone_and_bounded(a in 0.0..5.0f64, b in 0.0..5.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(height_scale_factor(lo) <= height_scale_factor(hi));
            prop_assert!((0.6..1.0).contains(&height_scale_factor(lo)));
        }

        #[test]
        fn lut_height_non_increasing_towards_zero(a in 0.0..8.0f64, b in 0.0..8.0f64) {
            let lut = ProjectionLut::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lut.lookup(lo).unwrap().z_cam <= lut.lookup(hi).unwrap().z_cam);
        }
    }

    #[test]
    fn focal_matches_fov() {
        let c = cam(1.0, 90.0);
        assert!((c.focal - 200.0).abs() < 1e-9);
        assert!(CameraSettings::new(1.0, 180.0, 400, 400).is_err());
        assert!(CameraSettings::new(0.0, 90.0, 400, 400).is_err());
    }

    #[test]
    fn point_below_camera_hits_principal_pixel() {
        let c = cam(1.5, 90.0);
        let g = Vec3::new(2.0, 1.0, 0.0);
        let cloud = PointCloud::new(vec![Vec3::new(2.0, 1.0, 0.3)], Frame::Shadow);
        let img = project(&cloud, &g, &c);
        assert_eq!(img.at(200, 200), Some(1.5 - 0.3));
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn pinhole_offset_by_hand() {
        // f = 200 at 90 degrees; x = 0.5 m at depth 1.0 m lands 100 px right.
        let c = cam(1.0, 90.0);
        let pose = c.pose_above(&Vec3::zeros());
        let (u, v, d) = project_point(&c, &pose, &Vec3::new(0.5, 0.0, 0.0)).unwrap();
        assert!((u - (c.cx + 100.0)).abs() < 1e-12);
        assert!((v - c.cy).abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zbuffer_keeps_top_surface() {
        let c = cam(2.0, 90.0);
        let cloud = PointCloud::new(
            vec![Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 0.0, 1.0)],
            Frame::Shadow,
        );
        let img = project(&cloud, &Vec3::zeros(), &c);
        assert_eq!(img.at(200, 200), Some(1.0));
    }

    #[test]
    fn back_project_principal_point_is_ground_point() {
        let c = cam(1.3, 71.0);
        let g = Vec3::new(1.2, -0.4, 0.2);
        let pose = c.pose_above(&g);
        let p = back_project((c.cx, c.cy), c.z_cam, &c, &pose).unwrap();
        assert!((p - g).norm() < 1e-15);
        assert!(back_project((-3.0, 0.0), 1.0, &c, &pose).is_err());
        assert!(back_project((10.0, 10.0), 0.0, &c, &pose).is_err());
    }

    proptest! {
        #[test]
        fn back_projection_round_trip(x in -0.8..0.8f64, y in -0.8..0.8f64, z in -0.3..0.9f64,
                                      gx in -3.0..3.0f64, gy in -3.0..3.0f64) {
            let c = cam(1.6, 84.0);
            let pose = c.pose_above(&Vec3::new(gx, gy, 0.0));
            let p = Vec3::new(gx + x, gy + y, z);
            let (u, v, d) = project_point(&c, &pose, &p).unwrap();
            prop_assume!(u >= 0.0 && v >= 0.0 && u <= 400.0 && v <= 400.0);
            let q = back_project((u, v), d, &c, &pose).unwrap();
            prop_assert!((p - q).norm() < 1e-9);
        }

        #[test]
        fn projection_translation_equivariant(dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
            // Integer-millimetre shifts keep the arithmetic exact enough that
            // only z-buffer ties could differ; none exist in this lattice.
            let pts: Vec<Vec3> = (0..400).map(|i| {
                let a = i as f64 * 0.05;
                Vec3::new(0.4 * a.cos() * (i as f64 / 400.0), 0.4 * a.sin() * (i as f64 / 400.0), 0.1 + 0.001 * i as f64)
            }).collect();
            let c = cam(1.3, 71.0);
            let base = project(&PointCloud::new(pts.clone(), Frame::Shadow), &Vec3::zeros(), &c);
            let d = Vec3::new(dx, dy, 0.0);
            let moved = project(&PointCloud::new(pts.iter().map(|p| p + d).collect(), Frame::Shadow), &d, &c);
            let mismatched = base.valid.iter().zip(&moved.valid).filter(|(a, b)| a != b).count();
            prop_assert!(mismatched <= 2, "{} pixels differ", mismatched);
            prop_assert!(moved.valid_count() <= pts.len());
        }
    }
}
