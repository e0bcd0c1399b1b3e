//! Serial-chain kinematics for the patient-side (PSM) and endoscope (ECM) arms.
//!
//! A chain is a list of fixed link transforms interleaved with joints that act
//! about (revolute) or along (prismatic) the local z axis:
//!
//! ```text
//! base_T_tip(q) = L0 * Z(q1) * L1 * Z(q2) * ... * Z(qn) * Ln
//! base_T_tool(q) = base_T_tip(q) * tip_T_tool
//! ```
//!
//! The base frame is the remote center of motion (RCM). The first two joints
//! rotate about axes through the RCM and the third slides along the shaft
//! line through it, so the shaft always passes through the base origin.

mod chain;
mod ik;

pub use chain::{ecm_chain, psm_chain, ChainDocument, ChainSpec, EcmParams, PsmParams};
pub use ik::{inverse_kinematics, inverse_kinematics_position, IkConfig, IkSolution};

use nalgebra::{Isometry3, Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Rigid transform; rotation stored as a unit quaternion.
pub type Pose = Isometry3<f64>;

/// Which arm a chain or joint vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArmKind {
    Psm,
    Ecm,
}

impl ArmKind {
    pub fn dof(self) -> usize {
        match self {
            ArmKind::Psm => 6,
            ArmKind::Ecm => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointType {
    #[serde(rename = "R")]
    Revolute,
    #[serde(rename = "P")]
    Prismatic,
}

/// Joint coordinates (radians for revolute joints, meters for prismatic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector {
    pub values: Vec<f64>,
    pub arm: ArmKind,
}

impl JointVector {
    pub fn new(arm: ArmKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != arm.dof() {
            return Err(SimError::DimensionMismatch {
                expected: arm.dof(),
                got: values.len(),
            });
        }
        Ok(Self { values, arm })
    }

    pub fn zeros(arm: ArmKind) -> Self {
        Self {
            values: vec![0.0; arm.dof()],
            arm,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for JointVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// An arm placed in the world: chain, RCM pose and current joint state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmModel {
    pub chain: ChainSpec,
    pub rcm_pose: Pose,
    pub current_q: JointVector,
}

impl ArmModel {
    pub fn new(chain: ChainSpec, rcm_pose: Pose, q: JointVector) -> Result<Self> {
        chain.check_dims(&q)?;
        let current_q = clamp_joints(&chain, &q);
        Ok(Self {
            chain,
            rcm_pose,
            current_q,
        })
    }

    /// Tool pose in world coordinates.
    pub fn tool_pose_world(&self) -> Pose {
        self.rcm_pose * chain::tool_pose_unchecked(&self.chain, &self.current_q.values)
    }

    pub fn tool_pose_world_at(&self, q: &JointVector) -> Result<Pose> {
        Ok(self.rcm_pose * tool_pose(&self.chain, q)?)
    }

    /// Solve for a world-frame tool target seeded from the current joints.
    pub fn solve_world(&self, target_world: &Pose, config: &IkConfig) -> Result<IkSolution> {
        let target = self.rcm_pose.inverse() * target_world;
        inverse_kinematics(&self.chain, &target, &self.current_q, config)
    }
}

/// `base_T_tip`; the tool transform is not applied.
pub fn forward_kinematics(chain: &ChainSpec, q: &JointVector) -> Result<Pose> {
    chain.check_dims(q)?;
    if !q.is_finite() {
        return Err(SimError::Contract("joint vector has non-finite entries".into()));
    }
    Ok(chain::fk_unchecked(chain, &q.values))
}

/// `base_T_tool`.
pub fn tool_pose(chain: &ChainSpec, q: &JointVector) -> Result<Pose> {
    Ok(forward_kinematics(chain, q)? * chain.tip_to_tool)
}

/// Geometric Jacobian of the tool frame expressed in the base frame.
///
/// Rows 0..3 are the linear velocity of the tool origin, rows 3..6 the
/// angular velocity; column `i` is the velocity per unit rate of joint `i`.
pub fn jacobian(chain: &ChainSpec, q: &JointVector) -> Result<nalgebra::DMatrix<f64>> {
    chain.check_dims(q)?;
    Ok(chain::jacobian_unchecked(chain, &q.values))
}

/// Clamp every coordinate into the chain's joint limits.
pub fn clamp_joints(chain: &ChainSpec, q: &JointVector) -> JointVector {
    let values = q
        .values
        .iter()
        .zip(&chain.limits)
        .map(|(v, [lo, hi])| v.clamp(*lo, *hi))
        .collect();
    JointVector { values, arm: q.arm }
}

/// Pose error `[p_target - p; axis_angle(R_target * R^T)]`.
pub fn pose_error(current: &Pose, target: &Pose) -> Vector6<f64> {
    let dp = target.translation.vector - current.translation.vector;
    let dr = rotation_error(&current.rotation, &target.rotation);
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Axis-angle vector of `R_target * R_current^T`.
pub fn rotation_error(current: &UnitQuaternion<f64>, target: &UnitQuaternion<f64>) -> Vector3<f64> {
    (target * current.inverse()).scaled_axis()
}

/// Build a pose from a row-major 4x4 homogeneous matrix.
pub fn pose_from_row_major(m: &[f64; 16]) -> Result<Pose> {
    if (m[12].abs() + m[13].abs() + m[14].abs()) > 1e-12 || (m[15] - 1.0).abs() > 1e-12 {
        return Err(SimError::Config("bottom row of a homogeneous transform must be [0 0 0 1]".into()));
    }
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
        return Err(SimError::Config(format!(
            "rotation block is not special orthogonal (deviation {orth:.2e})"
        )));
    }
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Isometry3::from_parts(Vector3::new(m[3], m[7], m[11]).into(), rot))
}

pub fn pose_to_row_major(p: &Pose) -> [f64; 16] {
    let h = p.to_homogeneous();
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = h[(r, c)];
        }
    }
    out
}

/// Top-down tool orientation (approach along world -z) rotated by `yaw` about world z.
pub fn top_down(yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
}

/// Yaw of a top-down tool: angle of the tool x axis in the world xy plane.
pub fn tool_yaw(rotation: &UnitQuaternion<f64>) -> f64 {
    let x = rotation * Vector3::x();
    x.y.atan2(x.x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn clamp_is_idempotent_and_saturates() {
        let chain = psm_chain(&PsmParams::default());
        let hi = chain.limits[0][1];
        let mut q = JointVector::zeros(ArmKind::Psm);
        q[0] = hi + 0.5;
        q[2] = 0.1;
        let c = clamp_joints(&chain, &q);
        assert_eq!(c[0], hi);
        assert_eq!(c[2], 0.1);
        assert_eq!(clamp_joints(&chain, &c), c);
        let inside = JointVector::new(ArmKind::Psm, vec![0.1, -0.2, 0.05, 0.3, 0.1, -0.1]).unwrap();
        assert_eq!(clamp_joints(&chain, &inside), inside);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let chain = psm_chain(&PsmParams::default());
        let q = JointVector::zeros(ArmKind::Ecm);
        assert!(matches!(
            forward_kinematics(&chain, &q),
            Err(SimError::DimensionMismatch { expected: 6, got: 4 })
        ));
        assert!(JointVector::new(ArmKind::Psm, vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let p = Pose::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.3, -0.1, 0.7));
        let back = pose_from_row_major(&pose_to_row_major(&p)).unwrap();
        assert!(close((back.translation.vector - p.translation.vector).norm(), 0.0, 1e-12));
        assert!(close(back.rotation.angle_to(&p.rotation), 0.0, 1e-9));
        let mut bad = pose_to_row_major(&p);
        bad[0] *= 1.1;
        assert!(pose_from_row_major(&bad).is_err());
    }

    #[test]
    fn top_down_points_along_negative_z() {
        let r = top_down(0.4);
        let z = r * Vector3::z();
        assert!(close(z.z, -1.0, 1e-12));
        assert!(close(tool_yaw(&r), 0.4, 1e-12));
    }
}
