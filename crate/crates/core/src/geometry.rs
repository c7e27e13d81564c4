//! Camera model and rigid transforms shared by every stage.
//!
//! Conventions: poses are camera-to-world (`T_WC`); integer pixel `(i, j)`
//! samples at continuous coordinate `(i + 0.5, j + 0.5)`; depth lookups use
//! nearest-neighbor at `floor(u)`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use thiserror::Error;

/// Default near plane for projection validity, in meters.
pub const Z_NEAR_DEFAULT: f64 = 0.01;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z:.6} <= z_near = {z_near:.6})")]
    BehindCamera { z: f64, z_near: f64 },
    #[error("invalid depth value {0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Pinhole camera intrinsics plus the image geometry they apply to.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Multiplier converting stored depth units to meters.
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        depth_scale: f64,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        if !(self.depth_scale > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "depth_scale must be positive, got {}",
                self.depth_scale
            )));
        }
        Ok(())
    }

    /// Continuous pixel coordinates of integer pixel `(i, j)`.
    #[inline]
    pub fn pixel_center(i: u32, j: u32) -> Vector2<f64> {
        Vector2::new(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Whether a continuous pixel coordinate falls inside the image.
    #[inline]
    pub fn contains(&self, u: Vector2<f64>) -> bool {
        u.x >= 0.0 && u.x < self.width as f64 && u.y >= 0.0 && u.y < self.height as f64
    }
}

/// Perspective projection of a camera-frame point into pixel coordinates.
#[inline]
pub fn project(p_cam: Vector3<f64>, k: &Intrinsics, z_near: f64) -> Result<Vector2<f64>, GeometryError> {
    if p_cam.z <= z_near {
        return Err(GeometryError::BehindCamera {
            z: p_cam.z,
            z_near,
        });
    }
    Ok(Vector2::new(
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

/// Inverse perspective projection: pixel + depth back to a camera-frame point.
#[inline]
pub fn backproject(u: Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Vector3::new(
        (u.x - k.cx) / k.fx * depth,
        (u.y - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub const ORTHONORMALITY_TOL: f64 = 1e-6;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let gram = self.rotation.transpose() * self.rotation;
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > Self::ORTHONORMALITY_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (max |R'R - I| = {max_dev:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > Self::ORTHONORMALITY_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det:.9} != +1"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }

    /// Apply the transform to a point.
    #[inline]
    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn inverse(&self) -> Pose {
        let rot_t = self.rotation.transpose();
        Pose {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    /// Parse from 16 row-major entries of a 4x4 homogeneous matrix.
    pub fn from_row_major(vals: &[f64; 16]) -> Result<Self, GeometryError> {
        let bottom = &vals[12..16];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose(format!(
                "bottom row must be 0 0 0 1, got {bottom:?}"
            )));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Rotation matrix about an axis, for building synthetic trajectories.
pub fn rotation_about_axis(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}
