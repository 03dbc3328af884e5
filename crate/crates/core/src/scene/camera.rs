//! Pinhole cameras and the linear transforms between two views.
//!
//! World frame: z up. Camera frame: x right, y down, z forward, so that
//! `x_cam = R·x_world + t` and pixel `(u, v, 1) ∝ K·x_cam`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RIGID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Square-pixel intrinsics with the principal point at the image center.
pub fn intrinsics(width: usize, height: usize, fov_x_deg: f64) -> Matrix3<f64> {
    let f = (width as f64 / 2.0) / (fov_x_deg.to_radians() / 2.0).tan();
    Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0)
}

/// Rotation for a camera looking along heading `yaw` (from +x toward +y),
/// tilted down by `pitch` radians.
pub fn look_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let forward = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin());
    let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

impl CameraPose {
    pub fn new(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            intrinsics,
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera at `center` with the given heading and downward pitch.
    pub fn looking(intrinsics: Matrix3<f64>, center: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        let rotation = look_rotation(yaw, pitch);
        Self {
            intrinsics,
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        let k = &self.intrinsics;
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper || !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::InvalidConfig(
                "intrinsics must be upper-triangular with a positive diagonal".into(),
            ));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// The homogeneous extrinsic block `[R t; 0 1]`.
    pub fn extrinsic(&self) -> Matrix4<f64> {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        e
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > RIGID_TOL {
        return Err(Error::NonRigidTransform(format!("RᵀR deviates from I by {dev:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > RIGID_TOL {
        return Err(Error::NonRigidTransform(format!("det R = {det}")));
    }
    Ok(())
}

/// `K_t = T_K·K_s` and `[R_t t_t; 0 1] = T_Rt·[R_s t_s; 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub t_k: Matrix3<f64>,
    pub t_rt: Matrix4<f64>,
}

impl ViewTransform {
    pub fn identity() -> Self {
        Self {
            t_k: Matrix3::identity(),
            t_rt: Matrix4::identity(),
        }
    }

    /// The transform that maps `source` onto `target`.
    pub fn between(source: &CameraPose, target: &CameraPose) -> Result<Self> {
        let k_inv = source
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular intrinsics".into()))?;
        let e_inv = source
            .extrinsic()
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular extrinsics".into()))?;
        Ok(Self {
            t_k: target.intrinsics * k_inv,
            t_rt: target.extrinsic() * e_inv,
        })
    }

    pub fn inverse(&self) -> Result<Self> {
        Ok(Self {
            t_k: self
                .t_k
                .try_inverse()
                .ok_or_else(|| Error::InvalidConfig("singular T_K".into()))?,
            t_rt: self
                .t_rt
                .try_inverse()
                .ok_or_else(|| Error::NonRigidTransform("singular T_Rt".into()))?,
        })
    }

    /// Rigid camera motion: raise the camera by `lift` world units along +z
    /// and tilt it down by an extra `extra_pitch` radians about its own x axis.
    pub fn elevation(source: &CameraPose, lift: f64, extra_pitch: f64) -> Self {
        let center = source.center() + Vector3::new(0.0, 0.0, lift);
        let (s, c) = extra_pitch.sin_cos();
        // Tilting down rotates forward toward down: rotation about camera x.
        let tilt = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        let rotation = tilt * source.rotation;
        let target = CameraPose {
            intrinsics: source.intrinsics,
            rotation,
            translation: -(rotation * center),
        };
        Self::between(source, &target).expect("source pose is invertible")
    }
}

/// Applies `vt` to `pose`; the result must still be a valid rigid camera.
pub fn apply_view_transform(pose: &CameraPose, vt: &ViewTransform) -> Result<CameraPose> {
    let k = vt.t_k * pose.intrinsics;
    let e = vt.t_rt * pose.extrinsic();
    let bottom = e.fixed_view::<1, 4>(3, 0);
    if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > RIGID_TOL {
        return Err(Error::NonRigidTransform(
            "extrinsic bottom row is not (0, 0, 0, 1)".into(),
        ));
    }
    let rotation: Matrix3<f64> = e.fixed_view::<3, 3>(0, 0).into_owned();
    let translation: Vector3<f64> = e.fixed_view::<3, 1>(0, 3).into_owned();
    check_rotation(&rotation)?;
    let out = CameraPose {
        intrinsics: k,
        rotation,
        translation,
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car_pose() -> CameraPose {
        CameraPose::looking(
            intrinsics(64, 64, 75.0),
            Vector3::new(-10.0, 1.5, 1.5),
            0.2,
            3f64.to_radians(),
        )
    }

    #[test]
    fn look_rotation_is_proper() {
        for (yaw, pitch) in [(0.0, 0.0), (1.0, 0.5), (-2.0, 1.2)] {
            check_rotation(&look_rotation(yaw, pitch)).unwrap();
        }
        let r = look_rotation(0.0, 0.0);
        // Looking along +x: a point ahead projects to positive depth.
        assert!((r * Vector3::new(1.0, 0.0, 0.0))[2] > 0.99);
        // World up maps to camera −y.
        assert!((r * Vector3::new(0.0, 0.0, 1.0))[1] < -0.99);
    }

    #[test]
    fn identity_transform_keeps_pose() {
        let p = car_pose();
        let q = apply_view_transform(&p, &ViewTransform::identity()).unwrap();
        assert!((q.extrinsic() - p.extrinsic()).abs().max() < 1e-15);
        assert_eq!(q.intrinsics, p.intrinsics);
    }

    #[test]
    fn elevation_builds_drone_pose() {
        let car = car_pose();
        let vt = ViewTransform::elevation(&car, 28.5, 60f64.to_radians());
        let drone = apply_view_transform(&car, &vt).unwrap();
        assert!((drone.center()[2] - (1.5 + 28.5)).abs() < 1e-9);
        assert!(((drone.center() - car.center()).xy()).norm() < 1e-9);
        // Forward axis now points down at 63° below the horizon.
        let forward = drone.rotation.row(2);
        assert!((-forward[2] - 63f64.to_radians().sin()).abs() < 1e-9);
        assert!((drone.intrinsics - car.intrinsics).abs().max() < 1e-12);
    }

    #[test]
    fn round_trip_through_inverse() {
        let car = car_pose();
        let drone = CameraPose::looking(intrinsics(64, 64, 60.0), Vector3::new(-25.0, 0.0, 30.0), 0.1, 1.0);
        let vt = ViewTransform::between(&car, &drone).unwrap();
        let there = apply_view_transform(&car, &vt).unwrap();
        assert!((there.extrinsic() - drone.extrinsic()).abs().max() < 1e-9);
        assert!((there.intrinsics - drone.intrinsics).abs().max() < 1e-9);
        let back = apply_view_transform(&there, &vt.inverse().unwrap()).unwrap();
        assert!((back.extrinsic() - car.extrinsic()).abs().max() < 1e-8);
        assert!((back.intrinsics - car.intrinsics).abs().max() < 1e-8);
    }

    #[test]
    fn non_rigid_transform_is_rejected() {
        let mut vt = ViewTransform::identity();
        vt.t_rt[(0, 0)] = 2.0;
        assert!(matches!(
            apply_view_transform(&car_pose(), &vt),
            Err(Error::NonRigidTransform(_))
        ));
    }
}
