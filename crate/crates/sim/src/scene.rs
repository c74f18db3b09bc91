//! Parametric bench scenes.
//!
//! Each hole site is a heightfield around its axis: a funnel falling from the
//! collar radius to the hole radius at the neck depth, a cone face from the
//! collar out to the base radius, and flat ground beyond. Inside the hole
//! radius the shaft is open and never returns. Pits lower the cone face by a
//! fixed depth inside a disk, clamped at ground level.

use borehole_core::geometry::Vec3;
use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Ground = 0,
    Cone = 1,
    HoleWall = 2,
    Pit = 3,
    Noise = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pit {
    /// Direction from the hole axis (rad, from +x).
    pub bearing: f64,
    /// Pit centre distance as a fraction of the cone base radius.
    pub radial_fraction: f64,
    pub radius: f64,
    pub depth: f64,
}

impl Pit {
    fn centre(&self, site: &HoleSite) -> (f64, f64) {
        let d = self.radial_fraction * site.cone_base_radius;
        (site.centre[0] + d * self.bearing.cos(), site.centre[1] + d * self.bearing.sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleSite {
    /// Hole axis position on the ground (m).
    pub centre: [f64; 2],
    pub cone_base_radius: f64,
    /// Height of the cone at the collar (m).
    pub cone_height: f64,
    pub hole_diameter: f64,
    pub collar_diameter: f64,
    /// Depth below ground where the funnel meets the shaft (m).
    pub neck_depth: f64,
    #[serde(default)]
    pub pits: Vec<Pit>,
}

impl HoleSite {
    pub fn new(centre: [f64; 2], cone_base_radius: f64, cone_height: f64, hole_diameter: f64) -> Self {
        HoleSite {
            centre,
            cone_base_radius,
            cone_height,
            hole_diameter,
            collar_diameter: hole_diameter + 0.02,
            neck_depth: 0.30,
            pits: Vec::new(),
        }
    }

    pub fn hole_radius(&self) -> f64 {
        self.hole_diameter / 2.0
    }

    pub fn collar_radius(&self) -> f64 {
        self.collar_diameter / 2.0
    }

    /// Outer reach of the site including pits spilling past the base.
    pub fn overlaps(&self, other: &HoleSite) -> bool {
        let d = (self.centre[0] - other.centre[0]).hypot(self.centre[1] - other.centre[1]);
        d < self.reach() + other.reach()
    }

    fn reach(&self) -> f64 {
        self.pits
            .iter()
            .map(|p| p.radial_fraction * self.cone_base_radius + p.radius)
            .fold(self.cone_base_radius, f64::max)
    }

    fn validate(&self) -> Result<(), SimError> {
        let (r, rc, rb) = (self.hole_radius(), self.collar_radius(), self.cone_base_radius);
        if !(r > 0.0 && r <= rc && rc < rb) {
            return Err(SimError::Spec(
                "need 0 < hole diameter <= collar diameter < cone base diameter".into(),
            ));
        }
        if !(self.cone_height > 0.0 && self.neck_depth > 0.0) {
            return Err(SimError::Spec("cone height and neck depth must be positive".into()));
        }
        for p in &self.pits {
            if !(p.radius > 0.0 && p.depth > 0.0) {
                return Err(SimError::Spec("pit radius and depth must be positive".into()));
            }
            if p.radial_fraction * rb - p.radius <= rc {
                return Err(SimError::Spec("pit overlaps the collar".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub sites: Vec<HoleSite>,
    /// Isotropic jitter added to every return (m).
    pub surface_jitter: f64,
    /// Extra returns floating above the surface, as a fraction of real hits.
    pub flying_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            sites: vec![HoleSite::new([0.0, 0.0], 1.0, 0.55, 0.27)],
            surface_jitter: 0.005,
            flying_noise: 0.0,
            seed: 0,
        }
    }
}

/// Height model inside one region of the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Patch {
    Ground { label: Label },
    /// `z = a + b ρ`, ρ measured from `site`'s axis, optionally floored at 0.
    Radial { site: usize, a: f64, b: f64, floor0: bool, label: Label },
    Shaft { site: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self, SimError> {
        for s in &spec.sites {
            s.validate()?;
        }
        for (i, a) in spec.sites.iter().enumerate() {
            for b in &spec.sites[i + 1..] {
                if a.overlaps(b) {
                    return Err(SimError::Spec("hole sites overlap".into()));
                }
            }
        }
        if !(spec.surface_jitter >= 0.0 && spec.flying_noise >= 0.0) {
            return Err(SimError::Spec("noise levels must be non-negative".into()));
        }
        Ok(Scene { spec })
    }

    pub fn sites(&self) -> &[HoleSite] {
        &self.spec.sites
    }

    pub(crate) fn patch_at(&self, x: f64, y: f64) -> Patch {
        for (k, s) in self.spec.sites.iter().enumerate() {
            let rho = (x - s.centre[0]).hypot(y - s.centre[1]);
            let pit = s.pits.iter().find(|p| {
                let c = p.centre(s);
                (x - c.0).hypot(y - c.1) < p.radius
            });
            if rho >= s.reach() {
                continue;
            }
            let (r, rc, rb, h) = (s.hole_radius(), s.collar_radius(), s.cone_base_radius, s.cone_height);
            if rho < r {
                return Patch::Shaft { site: k };
            }
            if rho < rc {
                let b = (h + s.neck_depth) / (rc - r);
                return Patch::Radial { site: k, a: -s.neck_depth - b * r, b, floor0: false, label: Label::HoleWall };
            }
            let b = -h / (rb - rc);
            let a = h * rb / (rb - rc);
            if let Some(p) = pit {
                return Patch::Radial { site: k, a: a - p.depth, b, floor0: true, label: Label::Pit };
            }
            if rho < rb {
                return Patch::Radial { site: k, a, b, floor0: false, label: Label::Cone };
            }
        }
        Patch::Ground { label: Label::Ground }
    }

    /// Surface height and label at `(x, y)`; `None` over an open shaft.
    pub fn surface(&self, x: f64, y: f64) -> Option<(f64, Label)> {
        match self.patch_at(x, y) {
            Patch::Ground { label } => Some((0.0, label)),
            Patch::Shaft { .. } => None,
            Patch::Radial { site, a, b, floor0, label } => {
                let s = &self.spec.sites[site];
                let rho = (x - s.centre[0]).hypot(y - s.centre[1]);
                let z = a + b * rho;
                Some((if floor0 { z.max(0.0) } else { z }, label))
            }
        }
    }

    /// Label of the surface under `p`; shafts count as hole wall.
    pub fn label(&self, p: &Vec3) -> Label {
        self.surface(p.x, p.y).map_or(Label::HoleWall, |(_, l)| l)
    }

    /// Breakpoint radii around each site, for ray interval splitting.
    pub(crate) fn circles(&self) -> Vec<((f64, f64), f64)> {
        let mut out = Vec::new();
        for s in &self.spec.sites {
            let c = (s.centre[0], s.centre[1]);
            out.push((c, s.hole_radius()));
            out.push((c, s.collar_radius()));
            out.push((c, s.cone_base_radius));
            for p in &s.pits {
                out.push((p.centre(s), p.radius));
            }
        }
        out
    }

    pub(crate) fn site_reach(&self) -> Vec<((f64, f64), f64)> {
        self.spec.sites.iter().map(|s| ((s.centre[0], s.centre[1]), s.reach())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with_pit() -> Scene {
        let mut site = HoleSite::new([2.0, 0.0], 1.0, 0.6, 0.28);
        site.pits.push(Pit { bearing: std::f64::consts::FRAC_PI_2, radial_fraction: 0.85, radius: 0.08, depth: 0.04 });
        Scene::new(SceneSpec { sites: vec![site], ..Default::default() }).unwrap()
    }

    #[test]
    fn collar_top_is_cone_height() {
        let s = scene_with_pit();
        let (z, l) = s.surface(2.0 + 0.15 + 1e-9, 0.0).unwrap();
        assert_eq!(l, Label::Cone);
        assert!((z - 0.6).abs() < 1e-6);
        assert_eq!(s.surface(2.0 + 1.2, 0.0), Some((0.0, Label::Ground)));
    }

    #[test]
    fn shaft_is_hole_wall() {
        let s = scene_with_pit();
        assert_eq!(s.surface(2.0, 0.05), None);
        assert_eq!(s.label(&Vec3::new(2.0, 0.05, -1.0)), Label::HoleWall);
        let (z, l) = s.surface(2.0 + 0.145, 0.0).unwrap();
        assert_eq!(l, Label::HoleWall);
        assert!((z - 0.15).abs() < 1e-9);
    }

    #[test]
    fn pit_membership() {
        let s = scene_with_pit();
        let c = (2.0, 0.85);
        for k in 0..64 {
            let t = k as f64 * std::f64::consts::TAU / 64.0;
            for rr in [0.0, 0.03, 0.079, 0.081, 0.12] {
                let (x, y) = (c.0 + rr * t.cos(), c.1 + rr * t.sin());
                let inside = rr < 0.08;
                assert_eq!(s.label(&Vec3::new(x, y, 0.0)) == Label::Pit, inside, "r={rr}");
            }
        }
        let (z, _) = s.surface(c.0, c.1).unwrap();
        let cone: f64 = 0.6 * (1.0 - 0.85) / (1.0 - 0.15);
        assert!((z - (cone - 0.04).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let mut site = HoleSite::new([0.0, 0.0], 1.0, 0.5, 0.28);
        site.collar_diameter = 0.2;
        assert!(Scene::new(SceneSpec { sites: vec![site], ..Default::default() }).is_err());
        let a = HoleSite::new([0.0, 0.0], 1.0, 0.5, 0.28);
        let b = HoleSite::new([1.5, 0.0], 1.0, 0.5, 0.28);
        assert!(Scene::new(SceneSpec { sites: vec![a, b], ..Default::default() }).is_err());
    }
}
