//! Point clouds and their on-disk formats.
//!
//! Binary layout (all little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"BHPC"`                |
//! | 4      | 4    | point count `n` (u32)          |
//! | 8      | 12n  | `x, y, z` as f32 per point     |
//!
//! CSV layout is a header line `x,y,z,label` followed by one point per row.
//! The label column is optional on read.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

pub const CLOUD_MAGIC: &[u8; 4] = b"BHPC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    Sensor,
    Shadow,
    Body,
    Odom,
    Utm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: Frame) -> Self {
        PointCloud { points, frame }
    }

    pub fn empty(frame: Frame) -> Self {
        PointCloud {
            points: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }

    /// Keeps points for which `keep` returns true.
    pub fn filtered(&self, mut keep: impl FnMut(&Vec3) -> bool) -> PointCloud {
        PointCloud {
            points: self.points.iter().filter(|p| keep(p)).copied().collect(),
            frame: self.frame,
        }
    }

    pub fn max_z(&self) -> Option<f64> {
        self.points.iter().map(|p| p.z).reduce(f64::max)
    }
}

/// Applies `t` to every point and retags the cloud as `frame`.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform, frame: Frame) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        frame,
    }
}

pub fn write_binary(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    encode_binary(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

pub fn encode_binary(w: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    let n = u32::try_from(cloud.len())
        .map_err(|_| Error::InvalidInput("cloud too large for binary format".into()))?;
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    for p in &cloud.points {
        for c in [p.x, p.y, p.z] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a binary cloud; the frame tag is supplied by the caller.
pub fn read_binary(path: impl AsRef<Path>, frame: Frame) -> Result<PointCloud> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    decode_binary(&mut r, frame)
}

pub fn decode_binary(r: &mut impl Read, frame: Frame) -> Result<PointCloud> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|_| Error::InvalidInput("truncated cloud header".into()))?;
    if &header[..4] != CLOUD_MAGIC {
        return Err(Error::InvalidInput("bad cloud magic".into()));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * 12];
    r.read_exact(&mut buf)
        .map_err(|_| Error::InvalidInput(format!("cloud body shorter than {n} points")))?;
    let points = buf
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            Vec3::new(f(0), f(4), f(8))
        })
        .collect();
    let cloud = PointCloud { points, frame };
    if !cloud.all_finite() {
        return Err(Error::InvalidInput("cloud contains non-finite coordinates".into()));
    }
    Ok(cloud)
}

/// Writes `x,y,z,label`; `labels` (if given) must match the point count.
pub fn write_csv(path: impl AsRef<Path>, cloud: &PointCloud, labels: Option<&[u8]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::InvalidInput("label count differs from point count".into()));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "x,y,z,label")?;
    for (i, p) in cloud.points.iter().enumerate() {
        let label = labels.map(|l| l[i]).unwrap_or(0);
        writeln!(w, "{},{},{},{}", p.x, p.y, p.z, label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>, frame: Frame) -> Result<PointCloud> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
            continue;
        }
        let mut fields = line.split(',').map(|s| s.trim().parse::<f64>());
        let mut next = || -> Result<f64> {
            fields
                .next()
                .and_then(|r| r.ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidInput(format!("bad coordinate on line {}", lineno + 1)))
        };
        points.push(Vec3::new(next()?, next()?, next()?));
    }
    Ok(PointCloud { points, frame })
}

/// Picks the reader by extension: `.csv` or the binary format otherwise.
pub fn read_any(path: impl AsRef<Path>, frame: Frame) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(path, frame),
        _ => read_binary(path, frame),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotationMatrix;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_transform_is_bitwise_noop() {
        let c = PointCloud::new(vec![Vec3::new(0.1, -2.5, 3.0e-7)], Frame::Sensor);
        let out = transform_cloud(&c, &RigidTransform::identity(), Frame::Shadow);
        assert_eq!(out.points, c.points);
        assert_eq!(out.frame, Frame::Shadow);
    }

    #[test]
    fn quarter_yaw_moves_x_to_y() {
        let c = PointCloud::new(vec![Vec3::x()], Frame::Body);
        let t = RigidTransform::new(RotationMatrix::about_z(FRAC_PI_2), Vec3::zeros());
        let out = transform_cloud(&c, &t, Frame::Odom);
        assert!((out.points[0] - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        encode_binary(&mut bytes, &PointCloud::new(vec![Vec3::x()], Frame::Sensor)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_binary(&mut bad.as_slice(), Frame::Sensor).is_err());
        bytes.truncate(bytes.len() - 1);
        assert!(decode_binary(&mut bytes.as_slice(), Frame::Sensor).is_err());
        assert!(decode_binary(&mut [].as_slice(), Frame::Sensor).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(pts in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3, -1e3f32..1e3), 0..64)) {
            let cloud = PointCloud::new(
                pts.iter().map(|&(x, y, z)| Vec3::new(x as f64, y as f64, z as f64)).collect(),
                Frame::Sensor,
            );
            let mut bytes = Vec::new();
            encode_binary(&mut bytes, &cloud).unwrap();
            prop_assert_eq!(bytes.len(), 8 + 12 * cloud.len());
            let back = decode_binary(&mut bytes.as_slice(), Frame::Sensor).unwrap();
            prop_assert_eq!(back, cloud);
        }

        #[test]
        fn transform_round_trip(x in -50.0..50.0f64, y in -50.0..50.0f64, z in -5.0..5.0f64,
                                r in -3.0..3.0f64, p in -1.0..1.0f64, w in -3.0..3.0f64) {
            let t = RigidTransform::new(RotationMatrix::from_rpy(r, p, w), Vec3::new(x, -y, z));
            let c = PointCloud::new(vec![Vec3::new(y, z, x), Vec3::new(-x, y, 1.0)], Frame::Sensor);
            let back = transform_cloud(&transform_cloud(&c, &t, Frame::Shadow), &t.inverse(), Frame::Sensor);
            for (a, b) in c.points.iter().zip(&back.points) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }
    }
}
