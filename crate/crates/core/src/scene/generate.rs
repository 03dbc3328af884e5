//! Random scene layouts and camera placements.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::camera::{intrinsics, CameraPose};
use super::render::{Appearance, SceneConfig, SceneObject, Shape, BUILDING, CAR, DEFAULT_PALETTE, PERSON, TREE};
use crate::error::{Error, Result};
use crate::sampling;

/// Inclusive ranges used to place the two cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseRanges {
    pub car_height: f64,
    pub car_pitch_deg: (f64, f64),
    pub car_fov_deg: f64,
    pub drone_height: (f64, f64),
    pub drone_pitch_deg: (f64, f64),
    pub drone_fov_deg: f64,
    /// Ground distance ahead of the car camera that the drone looks at.
    pub drone_aim_ahead: f64,
    pub yaw_jitter_deg: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            car_height: 1.5,
            car_pitch_deg: (0.0, 5.0),
            car_fov_deg: 75.0,
            drone_height: (25.0, 35.0),
            drone_pitch_deg: (50.0, 70.0),
            drone_fov_deg: 45.0,
            drone_aim_ahead: 12.0,
            yaw_jitter_deg: 8.0,
        }
    }
}

/// Template from which individual scenes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneFamily {
    pub extent: f64,
    pub road_half_width: (f64, f64),
    pub world_half_size: f64,
    pub wall_height: f64,
    pub buildings: (usize, usize),
    pub cars: (usize, usize),
    pub trees: (usize, usize),
    pub persons: (usize, usize),
    /// Per-object color perturbation, uniform in ±jitter per channel.
    pub color_jitter: u8,
    pub class_palette: Vec<[u8; 3]>,
    pub resolution: (usize, usize),
    pub appearance: Appearance,
    pub poses: PoseRanges,
}

impl Default for SceneFamily {
    fn default() -> Self {
        Self {
            extent: 30.0,
            road_half_width: (3.0, 5.0),
            world_half_size: 150.0,
            wall_height: 150.0,
            buildings: (3, 6),
            cars: (2, 5),
            trees: (3, 7),
            persons: (2, 5),
            color_jitter: 16,
            class_palette: DEFAULT_PALETTE.to_vec(),
            resolution: (64, 64),
            appearance: Appearance::default(),
            poses: PoseRanges::default(),
        }
    }
}

fn uniform(rng: &mut sampling::Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

fn count(rng: &mut sampling::Rng, range: (usize, usize)) -> usize {
    rng.random_range(range.0.max(1)..=range.1.max(range.0.max(1)))
}

fn overlaps(a: &SceneObject, b: &SceneObject, margin: f64) -> bool {
    (0..2).all(|k| (a.position[k] - b.position[k]).abs() < (a.size[k] + b.size[k]) / 2.0 + margin)
}

/// Draws one scene. Every object class gets at least one instance.
pub fn sample_scene(family: &SceneFamily, seed: u64) -> Result<SceneConfig> {
    let mut rng = sampling::rng(seed);
    let e = family.extent;
    let w = uniform(&mut rng, family.road_half_width);
    let jitter = family.color_jitter as i32;
    let palette = family.class_palette.clone();
    let mut objects: Vec<SceneObject> = Vec::new();

    let mut place = |rng: &mut sampling::Rng, class: u8, shape: Shape, size: [f64; 3], y_band: (f64, f64)| -> bool {
        for _ in 0..64 {
            let x = rng.random_range(-e + size[0] / 2.0 + 0.5..e - size[0] / 2.0 - 0.5);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * uniform(rng, y_band);
            let base = palette[class as usize];
            let color = base.map(|c| (c as i32 + rng.random_range(-jitter..=jitter)).clamp(0, 255) as u8);
            let candidate = SceneObject {
                shape,
                class,
                position: [x, y, 0.0],
                size,
                color,
            };
            if objects.iter().all(|o| !overlaps(o, &candidate, 0.5)) {
                objects.push(candidate);
                return true;
            }
        }
        false
    };

    let mut add = |rng: &mut sampling::Rng, class: u8, n: usize| -> Result<()> {
        let mut placed = 0;
        for _ in 0..n {
            let ok = match class {
                BUILDING => {
                    let size = [
                        rng.random_range(4.0..9.0),
                        rng.random_range(4.0..8.0),
                        rng.random_range(5.0..14.0),
                    ];
                    place(
                        rng,
                        class,
                        Shape::Box,
                        size,
                        (w + 2.0 + size[1] / 2.0, e - size[1] / 2.0 - 0.5),
                    )
                }
                CAR => {
                    let size = [
                        rng.random_range(3.6..4.6),
                        rng.random_range(1.7..2.0),
                        rng.random_range(1.3..1.7),
                    ];
                    place(rng, class, Shape::Box, size, (0.0, (w - size[1] / 2.0 - 0.2).max(0.0)))
                }
                TREE => {
                    let s = rng.random_range(2.0..3.5);
                    let size = [s, s, rng.random_range(4.0..8.0)];
                    place(rng, class, Shape::Box, size, (w + 0.8 + s / 2.0, e - s / 2.0 - 0.5))
                }
                _ => {
                    let size = [rng.random_range(1.0..1.4), 0.5, rng.random_range(2.0..2.6)];
                    place(rng, class, Shape::Billboard, size, (w + 0.4, w + 1.5))
                }
            };
            placed += ok as usize;
        }
        if placed == 0 {
            return Err(Error::InvalidConfig(format!(
                "could not place any object of class {class}"
            )));
        }
        Ok(())
    };

    // Large objects first so small ones fill the gaps.
    for (class, range) in [
        (BUILDING, family.buildings),
        (TREE, family.trees),
        (CAR, family.cars),
        (PERSON, family.persons),
    ] {
        let n = count(&mut rng, range);
        add(&mut rng, class, n)?;
    }

    let scene = SceneConfig {
        extent: e,
        road_half_width: w,
        world_half_size: family.world_half_size,
        wall_height: family.wall_height,
        objects,
        class_palette: family.class_palette.clone(),
        seed,
        resolution: family.resolution,
        appearance: family.appearance.clone(),
    };
    scene.validate()?;
    Ok(scene)
}

/// Places the car camera on the road heading along +x (or −x) and a drone
/// camera above, looking down at a point ahead of the car.
pub fn sample_poses(scene: &SceneConfig, ranges: &PoseRanges, seed: u64) -> Result<(CameraPose, CameraPose)> {
    let mut rng = sampling::rng(seed ^ 0x5EED_CA3E_0000_0001);
    let (width, height) = scene.resolution;
    let e = scene.extent;
    for _ in 0..256 {
        let heading = if rng.random_bool(0.5) { 0.0 } else { PI };
        let yaw = heading + rng.random_range(-1.0..=1.0) * ranges.yaw_jitter_deg.to_radians();
        let along = rng.random_range(0.25 * e..0.6 * e);
        let center = Vector3::new(
            -along * heading.cos(),
            rng.random_range(-0.5..=0.5) * scene.road_half_width,
            ranges.car_height,
        );
        let pitch = uniform(&mut rng, ranges.car_pitch_deg).to_radians();
        let car = CameraPose::looking(intrinsics(width, height, ranges.car_fov_deg), center, yaw, pitch);

        let lift = uniform(&mut rng, ranges.drone_height);
        let drone_pitch = uniform(&mut rng, ranges.drone_pitch_deg).to_radians();
        let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let aim = Vector3::new(center[0], center[1], 0.0) + dir * ranges.drone_aim_ahead;
        let drone_center = aim - dir * (lift / drone_pitch.tan()) + Vector3::new(0.0, 0.0, lift);
        let drone = CameraPose::looking(
            intrinsics(width, height, ranges.drone_fov_deg),
            drone_center,
            yaw,
            drone_pitch,
        );

        let clear = |p: &Vector3<f64>| {
            scene.objects.iter().all(|o| {
                o.shape != Shape::Box
                    || (0..2).any(|k| (p[k] - o.position[k]).abs() > o.size[k] / 2.0 + 0.3)
                    || p[2] > o.position[2] + o.size[2] + 0.3
            })
        };
        if clear(&car.center()) && clear(&drone.center()) {
            return Ok((car, drone));
        }
    }
    Err(Error::CameraInsideGeometry)
}

#[cfg(test)]
mod tests {
    use super::super::render::{render, NUM_CLASSES};
    use super::*;

    #[test]
    fn every_class_is_declared() {
        let family = SceneFamily::default();
        for seed in 0..20 {
            let scene = sample_scene(&family, seed).unwrap();
            assert!(scene.declared_classes().iter().all(|&d| d));
            for c in [BUILDING, CAR, TREE, PERSON] {
                assert!(scene.objects.iter().any(|o| o.class == c));
            }
        }
    }

    #[test]
    fn poses_respect_ranges() {
        let family = SceneFamily::default();
        for seed in 0..20 {
            let scene = sample_scene(&family, seed).unwrap();
            let (car, drone) = sample_poses(&scene, &family.poses, seed).unwrap();
            assert!((car.center()[2] - 1.5).abs() < 1e-9);
            let h = drone.center()[2];
            assert!((25.0..=35.0).contains(&h));
            let pitch = (-drone.rotation.row(2)[2]).asin().to_degrees();
            assert!((50.0 - 1e-9..=70.0 + 1e-9).contains(&pitch));
            let car_pitch = (-car.rotation.row(2)[2]).asin().to_degrees();
            assert!((-1e-9..=5.0 + 1e-9).contains(&car_pitch));
        }
    }

    #[test]
    fn both_views_render() {
        let family = SceneFamily::default();
        let scene = sample_scene(&family, 3).unwrap();
        let (car, drone) = sample_poses(&scene, &family.poses, 3).unwrap();
        for pose in [car, drone] {
            let v = render(&scene, &pose).unwrap();
            assert!(v.mask.iter().all(|&c| (c as usize) < NUM_CLASSES));
            assert_eq!(v.image.len(), 64 * 64 * 3);
        }
    }
}
