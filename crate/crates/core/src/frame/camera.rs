use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::FrameError;

/// Pinhole intrinsics plus the depth unit of the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Meters per stored depth unit.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), FrameError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0
            && [self.fx, self.fy, self.cx, self.cy, self.depth_scale]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(FrameError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const POSE_TOLERANCE: f64 = 1e-6;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks orthonormality and a positive determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, FrameError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(FrameError::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > POSE_TOLERANCE {
            return Err(FrameError::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {off:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > POSE_TOLERANCE {
            return Err(FrameError::InvalidPose(format!(
                "rotation determinant is {det:.6}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera looking from `eye` towards `target`, with image rows pointing
    /// along −`up`. Camera frame is x right, y down, z forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, FrameError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| FrameError::InvalidPose("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| FrameError::InvalidPose("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse_transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, FrameError> {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            Vector3::from_row_slice(&translation),
        )
    }
}

/// Back-projects pixel `(u, v)` with raw depth `depth_raw` into the world.
///
/// Returns `None` for the invalid-depth sentinel 0 and for depths beyond
/// `max_range` meters. Panics when the pixel lies outside the image.
pub fn backproject(
    u: u32,
    v: u32,
    depth_raw: u16,
    intr: &CameraIntrinsics,
    pose: &Pose,
    max_range: f64,
) -> Option<Point3<f64>> {
    assert!(
        u < intr.width && v < intr.height,
        "pixel ({u}, {v}) outside {}x{} image",
        intr.width,
        intr.height
    );
    let z = depth_in_range(depth_raw, intr.depth_scale, max_range)?;
    let cam = Vector3::new(
        (u as f64 - intr.cx) / intr.fx * z,
        (v as f64 - intr.cy) / intr.fy * z,
        z,
    );
    Some(Point3::from(pose.rotation * cam + pose.translation))
}

#[inline]
pub(crate) fn depth_in_range(depth_raw: u16, depth_scale: f64, max_range: f64) -> Option<f64> {
    if depth_raw == 0 {
        return None;
    }
    let z = depth_raw as f64 * depth_scale;
    (z <= max_range).then_some(z)
}

/// Projects a world point into the camera: `(u, v, depth_m)`. `None` when the
/// point is behind the camera.
pub fn project(p: &Point3<f64>, intr: &CameraIntrinsics, pose: &Pose) -> Option<(f64, f64, f64)> {
    let cam = pose.inverse_transform(p);
    if cam.z <= 0.0 {
        return None;
    }
    Some((
        intr.fx * cam.x / cam.z + intr.cx,
        intr.fy * cam.y / cam.z + intr.cy,
        cam.z,
    ))
}

/// Per-frame back-projection with per-column and per-row ray factors
/// computed once.
pub(crate) struct Backprojector<'a> {
    pose: &'a Pose,
    width: usize,
    depth_scale: f64,
    max_range: f64,
    x_factor: Vec<f64>,
    y_factor: Vec<f64>,
}

impl<'a> Backprojector<'a> {
    pub fn new(intr: &CameraIntrinsics, pose: &'a Pose, max_range: f64) -> Self {
        Self {
            pose,
            width: intr.width as usize,
            depth_scale: intr.depth_scale,
            max_range,
            x_factor: (0..intr.width).map(|u| (u as f64 - intr.cx) / intr.fx).collect(),
            y_factor: (0..intr.height).map(|v| (v as f64 - intr.cy) / intr.fy).collect(),
        }
    }

    /// Same result as [`backproject`] for the pixel at row-major `index`.
    #[inline]
    pub fn pixel(&self, index: usize, depth_raw: u16) -> Option<Point3<f64>> {
        let z = depth_in_range(depth_raw, self.depth_scale, self.max_range)?;
        let (u, v) = (index % self.width, index / self.width);
        let cam = Vector3::new(self.x_factor[u] * z, self.y_factor[v] * z, z);
        Some(Point3::from(self.pose.rotation * cam + self.pose.translation))
    }
}
