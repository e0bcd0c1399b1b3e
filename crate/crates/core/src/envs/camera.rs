use nalgebra::{Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::kinematics::Pose;

/// Principal point in normalized image coordinates.
pub const IMAGE_CENTER: Vector2<f64> = Vector2::new(0.5, 0.5);

/// Pinhole camera carried by the ECM.
///
/// Image coordinates are normalized to `[0, 1]²` with u to the right and v
/// downward. The camera frame has z along the optical axis, x to the image
/// right and y to the image bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera frame relative to the ECM tool frame.
    pub tool_to_camera: Pose,
    /// World direction that should appear as "up" in the image.
    pub nls_reference: Vector3<f64>,
}

impl Default for CameraModel {
    fn default() -> Self {
        // 60° field of view across the normalized image width.
        let f = 0.5 / (30f64.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: IMAGE_CENTER.x,
            cy: IMAGE_CENTER.y,
            tool_to_camera: Pose::identity(),
            nls_reference: Vector3::z(),
        }
    }
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: Vector2<f64>,
    /// Depth along the optical axis.
    pub depth: f64,
    pub in_view: bool,
}

impl CameraModel {
    pub fn camera_pose(&self, ecm_tool_world: &Pose) -> Pose {
        ecm_tool_world * self.tool_to_camera
    }

    /// Projects a world point. Points behind the camera report
    /// `uv = (-1, -1)` and are never in view.
    pub fn project(&self, camera_world: &Pose, p: &Vector3<f64>) -> Projection {
        let c = camera_world.inverse_transform_point(&Point3::from(*p)).coords;
        if c.z <= 1e-9 {
            return Projection {
                uv: Vector2::new(-1.0, -1.0),
                depth: c.z,
                in_view: false,
            };
        }
        let uv = Vector2::new(self.cx + self.fx * c.x / c.z, self.cy + self.fy * c.y / c.z);
        let in_view = (0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y);
        Projection { uv, depth: c.z, in_view }
    }

    /// Signed angle from the image up axis to the image-plane projection of
    /// the NLS reference, positive toward the image right. Rolling the
    /// camera by `+d` about its optical axis changes the result by `-d`.
    pub fn misorientation(&self, camera_world: &Pose) -> Result<f64> {
        let n = camera_world.rotation.inverse() * self.nls_reference;
        let planar = Vector2::new(n.x, n.y);
        if planar.norm() < 1e-9 * n.norm().max(1.0) {
            return Err(SimError::UndefinedOrientation);
        }
        // Image up is -y in the camera frame.
        Ok(n.x.atan2(-n.y))
    }
}

/// Dense tracking reward `C - (|p - p_c| + λ|θ*|)` with `C = 1`, `λ = 0.1`.
pub fn active_track_reward(p_img: &Vector2<f64>, theta_star: f64) -> f64 {
    const C: f64 = 1.0;
    const LAMBDA: f64 = 0.1;
    C - ((p_img - IMAGE_CENTER).norm() + LAMBDA * theta_star.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    /// Camera looking along world +y with image up = world +z.
    fn level_camera() -> Pose {
        // Camera x = world x, y = world -z, z = world y.
        let r = nalgebra::Rotation3::from_basis_unchecked(&[Vector3::x(), -Vector3::z(), Vector3::y()]);
        Pose::from_parts(Vector3::zeros().into(), UnitQuaternion::from_rotation_matrix(&r))
    }

    #[test]
    fn on_axis_point_projects_to_center() {
        let cam = CameraModel::default();
        let p = cam.project(&level_camera(), &Vector3::new(0.0, 0.3, 0.0));
        assert!((p.uv - IMAGE_CENTER).norm() < 1e-12);
        assert!(p.in_view);
        let behind = cam.project(&level_camera(), &Vector3::new(0.0, -0.3, 0.0));
        assert!(!behind.in_view);
    }

    #[test]
    fn aligned_camera_has_zero_misorientation() {
        let cam = CameraModel::default();
        assert!(cam.misorientation(&level_camera()).unwrap().abs() < 1e-12);
    }
}
