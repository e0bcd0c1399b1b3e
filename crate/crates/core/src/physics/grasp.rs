use std::fmt;
use std::str::FromStr;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::body::RigidBody;
use super::collision::{place, Placed};
use crate::error::{Result, SimError};
use crate::kinematics::Pose;

/// How a closing jaw takes hold of an object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GraspMode {
    /// Weld the designated object once the jaw tip is within `threshold_m`.
    Approx { threshold_m: f64 },
    /// Friction-limited pinch between the two finger pads.
    Interact,
}

impl GraspMode {
    pub fn approx_mm(mm: f64) -> Self {
        GraspMode::Approx { threshold_m: mm * 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GraspMode::Approx { threshold_m } if !(*threshold_m > 0.0) => {
                Err(SimError::Config("approx grasp threshold must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for GraspMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraspMode::Approx { threshold_m } => write!(f, "approx:{}", threshold_m * 1e3),
            GraspMode::Interact => f.write_str("interact"),
        }
    }
}

/// Parses `interact` or `approx:<millimeters>`.
impl FromStr for GraspMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "interact" {
            return Ok(GraspMode::Interact);
        }
        let mm = s
            .strip_prefix("approx:")
            .or_else(|| s.strip_prefix("approx@"))
            .and_then(|v| v.trim_end_matches("mm").parse::<f64>().ok())
            .ok_or_else(|| SimError::Config(format!("unknown grasp mode '{s}' (expected interact or approx:<mm>)")))?;
        let mode = GraspMode::approx_mm(mm);
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum GraspPhase {
    Free,
    /// Body welded to the tool frame; `offset` is `tool^-1 * body`.
    Attached { body: usize, offset: Pose },
    /// Body held by the pads. `anchor_tool` and `anchor_body` are the pinch
    /// center in tool and body coordinates; `relative` is `tool^-1 * body`
    /// rotation at the last re-anchoring.
    PinchHold {
        body: usize,
        pads: [usize; 2],
        anchor_tool: Vector3<f64>,
        anchor_body: Vector3<f64>,
        relative: UnitQuaternion<f64>,
    },
}

impl GraspPhase {
    pub fn body(&self) -> Option<usize> {
        match self {
            GraspPhase::Free => None,
            GraspPhase::Attached { body, .. } | GraspPhase::PinchHold { body, .. } => Some(*body),
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, GraspPhase::Free)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspState {
    pub phase: GraspPhase,
    pub stabilized: bool,
    /// Consecutive substeps the held body has stayed above the lift threshold.
    pub lifted_substeps: usize,
}

impl Default for GraspState {
    fn default() -> Self {
        Self {
            phase: GraspPhase::Free,
            stabilized: false,
            lifted_substeps: 0,
        }
    }
}

impl GraspState {
    /// The mode-exclusivity and stabilization invariants.
    pub fn consistent_with(&self, mode: &GraspMode) -> bool {
        let phase_ok = match (&self.phase, mode) {
            (GraspPhase::Attached { .. }, GraspMode::Interact) => false,
            (GraspPhase::PinchHold { .. }, GraspMode::Approx { .. }) => false,
            _ => true,
        };
        phase_ok && !(self.stabilized && self.phase.is_free())
    }
}

/// Two thin finger pads hinged at the jaw base, opening symmetrically about
/// the tool y axis. The pad tips meet at the tool origin when closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JawGeometry {
    pub pad_length: f64,
    pub pad_width: f64,
    pub pad_thickness: f64,
    /// Fully open half-angle, radians.
    pub max_half_angle: f64,
    /// Opening/closing rate, rad/s.
    pub speed: f64,
    /// Normal force each pad exerts while pinching, newtons.
    pub pinch_force: f64,
    /// Effective radius of the pad contact patch for torsional friction.
    pub patch_radius: f64,
}

impl Default for JawGeometry {
    fn default() -> Self {
        Self {
            pad_length: 0.0102,
            pad_width: 0.003,
            pad_thickness: 0.001,
            max_half_angle: 0.5,
            speed: 10.0,
            pinch_force: 2.0,
            patch_radius: 0.004,
        }
    }
}

impl JawGeometry {
    /// Pad poses in the tool frame for a given half-angle; index 0 opens
    /// toward -y, index 1 toward +y.
    pub fn pad_poses(&self, half_angle: f64) -> [Pose; 2] {
        let hinge = Pose::translation(0.0, 0.0, -self.pad_length);
        [-1.0, 1.0].map(|s: f64| {
            hinge
                * Pose::rotation(Vector3::x() * (-s * half_angle))
                * Pose::translation(0.0, s * 0.5 * self.pad_thickness, 0.5 * self.pad_length)
        })
    }

    pub fn pad_half_extents(&self) -> Vector3<f64> {
        Vector3::new(0.5 * self.pad_width, 0.5 * self.pad_thickness, 0.5 * self.pad_length)
    }
}

/// Distance from a point to the body's surface (zero inside).
pub fn point_distance(body: &RigidBody, p: &Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for part in &body.collider.parts {
        let d = match place(&(body.pose * part.local), &part.shape) {
            Placed::Plane { point, normal } => normal.dot(&(p - point)),
            Placed::Box { pose, half } => {
                let l = pose.inverse_transform_point(&Point3::from(*p)).coords;
                let outside = Vector3::new(
                    (l.x.abs() - half.x).max(0.0),
                    (l.y.abs() - half.y).max(0.0),
                    (l.z.abs() - half.z).max(0.0),
                );
                outside.norm()
            }
            Placed::Capsule { a, b, radius } => {
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * t)).norm() - radius
            }
        };
        best = best.min(d);
    }
    best.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grasp_mode_parsing() {
        assert_eq!("interact".parse::<GraspMode>().unwrap(), GraspMode::Interact);
        assert_eq!("approx:2".parse::<GraspMode>().unwrap(), GraspMode::approx_mm(2.0));
        assert_eq!(GraspMode::approx_mm(3.0).to_string(), "approx:3");
        assert!("approx:-1".parse::<GraspMode>().is_err());
        assert!("magnet".parse::<GraspMode>().is_err());
    }

    #[test]
    fn closed_pads_meet_at_tool_origin() {
        let g = JawGeometry::default();
        for (pose, s) in g.pad_poses(0.0).iter().zip([-1.0, 1.0]) {
            let inner_tip = pose * Point3::new(0.0, -s * 0.5 * g.pad_thickness, 0.5 * g.pad_length);
            assert!(inner_tip.coords.norm() < 1e-15);
        }
        let open = g.pad_poses(g.max_half_angle);
        let tip = |p: &Pose, s: f64| (p * Point3::new(0.0, -s * 0.5 * g.pad_thickness, 0.5 * g.pad_length)).coords;
        let gap = (tip(&open[1], 1.0) - tip(&open[0], -1.0)).norm();
        assert!((gap - 2.0 * g.pad_length * g.max_half_angle.sin()).abs() < 1e-12);
    }
}
