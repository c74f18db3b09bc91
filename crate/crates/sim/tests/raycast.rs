use borehole_core::geometry::{RigidTransform, RotationMatrix, Vec3};
use borehole_sim::bench::{facing_pose, SensorPose};
use borehole_sim::lidar::{first_hit, raycast, BeamPattern};
use borehole_sim::scene::{HoleSite, Label, Pit, Scene, SceneSpec};
use proptest::prelude::*;

fn scene(site: HoleSite, jitter: f64) -> Scene {
    Scene::new(SceneSpec { sites: vec![site], surface_jitter: jitter, flying_noise: 0.0, seed: 0 }).unwrap()
}

/// Share of rays aimed through the collar opening that come back off the
/// funnel wall instead of escaping down the shaft.
fn aperture_return_fraction(site: &HoleSite, pose: &SensorPose) -> f64 {
    let s = scene(site.clone(), 0.0);
    let o = pose.transform().translation;
    let (mut through, mut returned) = (0usize, 0usize);
    let n = 60;
    for i in -n..=n {
        for j in -n..=n {
            let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
            if x.hypot(y) >= 1.0 {
                continue;
            }
            let r = site.collar_radius();
            let q = Vec3::new(site.centre[0] + r * x, site.centre[1] + r * y, site.cone_height);
            let d = (q - o).normalize();
            let k = (q - o).norm();
            match first_hit(&s, &o, &d, 100.0) {
                Some((t, _)) if t < k - 1e-9 => continue,
                Some((_, Label::HoleWall)) => {
                    through += 1;
                    returned += 1;
                }
                _ => through += 1,
            }
        }
    }
    assert!(through > 0, "no aperture rays");
    returned as f64 / through as f64
}

#[test]
fn grazing_views_see_more_funnel_wall() {
    let site = HoleSite::new([0.0, 0.0], 1.0, 0.5, 0.27);
    let f: Vec<f64> = [0.02, 0.5, 6.0]
        .iter()
        .map(|d| aperture_return_fraction(&site, &facing_pose(&site, *d, 0.3, 1.3)))
        .collect();
    assert!(f[0] <= f[1] && f[1] <= f[2], "{f:?}");
    assert!(f[2] > f[0], "{f:?}");
}

#[test]
fn fixed_seed_bit_identical_with_noise() {
    let mut site = HoleSite::new([2.0, 0.0], 1.1, 0.6, 0.25);
    site.pits.push(Pit { bearing: 1.0, radial_fraction: 0.85, radius: 0.08, depth: 0.04 });
    let s = Scene::new(SceneSpec { sites: vec![site], flying_noise: 0.02, ..Default::default() }).unwrap();
    let pose = SensorPose::level(0.0, 0.0, 0.0, 1.3).transform();
    let p = BeamPattern::sparse();
    let a = raycast(&s, &pose, &p, 11).unwrap();
    assert_eq!(a, raycast(&s, &pose, &p, 11).unwrap());
    assert_ne!(a.0, raycast(&s, &pose, &p, 12).unwrap().0);
}

#[test]
fn sensor_below_surface_rejected() {
    let s = scene(HoleSite::new([0.0, 0.0], 1.0, 0.5, 0.27), 0.0);
    let pose = RigidTransform::new(RotationMatrix::identity(), Vec3::new(0.5, 0.0, 0.1));
    assert!(raycast(&s, &pose, &BeamPattern::sparse(), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn returns_within_three_sigma_of_surface(
        dist in 0.5f64..5.0,
        bearing in 0.0f64..std::f64::consts::TAU,
        roll in -0.1f64..0.1,
        pitch in -0.1f64..0.1,
        seed in 0u64..1000,
    ) {
        let site = HoleSite::new([0.0, 0.0], 1.0, 0.55, 0.27);
        let s = scene(site.clone(), 0.0);
        let mut pose = facing_pose(&site, dist, bearing, 1.3);
        pose.roll = roll;
        pose.pitch = pitch;
        let t = pose.transform();
        let sigma = 0.01;
        let pattern = BeamPattern { range_noise: sigma, ..BeamPattern::dense().with_columns(256) };
        let (cloud, _) = raycast(&s, &t, &pattern, seed).unwrap();
        prop_assert!(!cloud.is_empty());
        for p in &cloud.points {
            let d = t.rotation.apply(&p.normalize());
            let (hit, _) = first_hit(&s, &t.translation, &d, pattern.max_range).unwrap();
            prop_assert!((p.norm() - hit).abs() <= 3.0 * sigma + 1e-9);
        }
    }
}
