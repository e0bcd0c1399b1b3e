use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{pose_from_row_major, pose_to_row_major, ArmKind, JointType, JointVector, Pose};
use crate::error::{Result, SimError};

/// Joint layout, fixed link transforms, limits and tool offset of a serial chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainDocument", into = "ChainDocument")]
pub struct ChainSpec {
    pub arm: ArmKind,
    pub joint_types: Vec<JointType>,
    /// `n + 1` transforms: `L0 .. Ln`.
    pub link_transforms: Vec<Pose>,
    pub limits: Vec<[f64; 2]>,
    pub tip_to_tool: Pose,
}

/// On-disk JSON form of a chain: 4x4 transforms stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDocument {
    pub joint_types: Vec<JointType>,
    pub link_transforms: Vec<[f64; 16]>,
    pub limits: Vec<[f64; 2]>,
    pub tip_to_tool: [f64; 16],
}

impl TryFrom<ChainDocument> for ChainSpec {
    type Error = SimError;

    fn try_from(doc: ChainDocument) -> Result<Self> {
        let links = doc
            .link_transforms
            .iter()
            .map(pose_from_row_major)
            .collect::<Result<Vec<_>>>()?;
        ChainSpec::new(doc.joint_types, links, doc.limits, pose_from_row_major(&doc.tip_to_tool)?)
    }
}

impl From<ChainSpec> for ChainDocument {
    fn from(c: ChainSpec) -> Self {
        ChainDocument {
            joint_types: c.joint_types,
            link_transforms: c.link_transforms.iter().map(pose_to_row_major).collect(),
            limits: c.limits,
            tip_to_tool: pose_to_row_major(&c.tip_to_tool),
        }
    }
}

const PSM_SEQUENCE: [JointType; 6] = [
    JointType::Revolute,
    JointType::Revolute,
    JointType::Prismatic,
    JointType::Revolute,
    JointType::Revolute,
    JointType::Revolute,
];
const ECM_SEQUENCE: [JointType; 4] = [
    JointType::Revolute,
    JointType::Revolute,
    JointType::Prismatic,
    JointType::Revolute,
];

impl ChainSpec {
    /// Validates the joint sequence (RRPRRR or RRPR), transform count and limits.
    pub fn new(
        joint_types: Vec<JointType>,
        link_transforms: Vec<Pose>,
        limits: Vec<[f64; 2]>,
        tip_to_tool: Pose,
    ) -> Result<Self> {
        let arm = if joint_types == PSM_SEQUENCE {
            ArmKind::Psm
        } else if joint_types == ECM_SEQUENCE {
            ArmKind::Ecm
        } else {
            return Err(SimError::Config(format!(
                "joint sequence {joint_types:?} is neither RRPRRR nor RRPR"
            )));
        };
        let n = joint_types.len();
        if link_transforms.len() != n + 1 {
            return Err(SimError::Config(format!(
                "expected {} link transforms, got {}",
                n + 1,
                link_transforms.len()
            )));
        }
        if limits.len() != n || limits.iter().any(|[lo, hi]| !(lo <= hi)) {
            return Err(SimError::Config("joint limits must be one ordered [lo, hi] per joint".into()));
        }
        Ok(Self {
            arm,
            joint_types,
            link_transforms,
            limits,
            tip_to_tool,
        })
    }

    pub fn dof(&self) -> usize {
        self.joint_types.len()
    }

    pub fn check_dims(&self, q: &JointVector) -> Result<()> {
        if q.len() != self.dof() {
            return Err(SimError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Midpoint of the limits, useful as a neutral IK seed.
    pub fn mid_configuration(&self) -> JointVector {
        JointVector {
            values: self.limits.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect(),
            arm: self.arm,
        }
    }
}

fn joint_motion(kind: JointType, q: f64) -> Pose {
    match kind {
        JointType::Revolute => Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q),
        ),
        JointType::Prismatic => Isometry3::translation(0.0, 0.0, q),
    }
}

pub(crate) fn fk_unchecked(chain: &ChainSpec, q: &[f64]) -> Pose {
    let mut t = chain.link_transforms[0];
    for (i, (&kind, &qi)) in chain.joint_types.iter().zip(q).enumerate() {
        t = t * joint_motion(kind, qi) * chain.link_transforms[i + 1];
    }
    t
}

pub(crate) fn tool_pose_unchecked(chain: &ChainSpec, q: &[f64]) -> Pose {
    fk_unchecked(chain, q) * chain.tip_to_tool
}

pub(crate) fn jacobian_unchecked(chain: &ChainSpec, q: &[f64]) -> DMatrix<f64> {
    let n = chain.dof();
    let mut frames = Vec::with_capacity(n);
    let mut t = chain.link_transforms[0];
    for (i, (&kind, &qi)) in chain.joint_types.iter().zip(q).enumerate() {
        frames.push(t);
        t = t * joint_motion(kind, qi) * chain.link_transforms[i + 1];
    }
    let tool = (t * chain.tip_to_tool).translation.vector;
    let mut j = DMatrix::zeros(6, n);
    for (i, frame) in frames.iter().enumerate() {
        let axis = frame.rotation * Vector3::z();
        match chain.joint_types[i] {
            JointType::Revolute => {
                let lin = axis.cross(&(tool - frame.translation.vector));
                j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
                j.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
            }
            JointType::Prismatic => {
                j.fixed_view_mut::<3, 1>(0, i).copy_from(&axis);
            }
        }
    }
    j
}

fn rot(axis: nalgebra::Unit<Vector3<f64>>, angle: f64) -> Pose {
    Isometry3::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&axis, angle))
}

/// Link parameters of the patient-side manipulator chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsmParams {
    /// Distance from the wrist pitch axis to the wrist yaw axis along the shaft.
    pub pitch_to_yaw: f64,
    /// Distance from the yaw axis (jaw hinge) to the jaw tip; the tool offset.
    pub yaw_to_tip: f64,
    pub insertion_range: [f64; 2],
    pub limits_outer: [f64; 2],
    pub limits_roll: [f64; 2],
    pub limits_wrist: [f64; 2],
}

impl Default for PsmParams {
    fn default() -> Self {
        Self {
            pitch_to_yaw: 0.0091,
            yaw_to_tip: 0.0102,
            insertion_range: [0.0, 0.24],
            limits_outer: [-1.0, 1.0],
            limits_roll: [-4.5, 4.5],
            limits_wrist: [-1.4, 1.4],
        }
    }
}

/// RRPRRR chain based at the RCM.
///
/// At `q = 0` the shaft points along base -z with the wrist pitch axis at the
/// RCM. Joint 1 rotates about base x, joint 2 about the (rotated) base y,
/// joint 3 inserts along the shaft, joint 4 rolls about it, joints 5 and 6 are
/// wrist pitch and yaw. The tip frame sits on the yaw axis with z along the
/// jaw and x along the yaw (jaw hinge) axis; the tool frame is the jaw tip.
pub fn psm_chain(p: &PsmParams) -> ChainSpec {
    let links = vec![
        rot(Vector3::y_axis(), FRAC_PI_2),
        rot(Vector3::x_axis(), -FRAC_PI_2),
        rot(Vector3::y_axis(), FRAC_PI_2),
        Pose::identity(),
        rot(Vector3::y_axis(), FRAC_PI_2),
        Isometry3::translation(-p.pitch_to_yaw, 0.0, 0.0) * rot(Vector3::x_axis(), -FRAC_PI_2),
        rot(Vector3::y_axis(), -FRAC_PI_2),
    ];
    let limits = vec![
        p.limits_outer,
        p.limits_outer,
        p.insertion_range,
        p.limits_roll,
        p.limits_wrist,
        p.limits_wrist,
    ];
    ChainSpec::new(
        PSM_SEQUENCE.to_vec(),
        links,
        limits,
        Isometry3::translation(0.0, 0.0, p.yaw_to_tip),
    )
    .expect("default PSM chain is well formed")
}

/// Link parameters of the endoscope manipulator chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcmParams {
    /// Lens offset beyond the shaft end, along the optical axis.
    pub lens_offset: f64,
    pub insertion_range: [f64; 2],
    pub limits_outer: [f64; 2],
    pub limits_roll: [f64; 2],
}

impl Default for EcmParams {
    fn default() -> Self {
        Self {
            lens_offset: 0.01,
            insertion_range: [0.0, 0.24],
            limits_outer: [-1.0, 1.0],
            limits_roll: [-1.5, 1.5],
        }
    }
}

/// RRPR chain based at the RCM; the tool frame is the camera with z along the
/// optical axis (the shaft), x to the image right and y to the image bottom.
pub fn ecm_chain(p: &EcmParams) -> ChainSpec {
    let links = vec![
        rot(Vector3::y_axis(), FRAC_PI_2),
        rot(Vector3::x_axis(), -FRAC_PI_2),
        rot(Vector3::y_axis(), FRAC_PI_2),
        Pose::identity(),
        rot(Vector3::z_axis(), -FRAC_PI_2),
    ];
    let limits = vec![p.limits_outer, p.limits_outer, p.insertion_range, p.limits_roll];
    ChainSpec::new(
        ECM_SEQUENCE.to_vec(),
        links,
        limits,
        Isometry3::translation(0.0, 0.0, p.lens_offset),
    )
    .expect("default ECM chain is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, jacobian, tool_pose};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(chain: &ChainSpec, rng: &mut ChaCha8Rng) -> JointVector {
        JointVector {
            values: chain.limits.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi)).collect(),
            arm: chain.arm,
        }
    }

    #[test]
    fn home_tip_sits_at_rcm_along_shaft() {
        let chain = psm_chain(&PsmParams::default());
        let tip = forward_kinematics(&chain, &JointVector::zeros(ArmKind::Psm)).unwrap();
        // Wrist pitch axis at the RCM, yaw axis one pitch-to-yaw length down the shaft.
        let expected = Vector3::new(0.0, 0.0, -0.0091);
        assert!((tip.translation.vector - expected).norm() < 1e-12);
        assert!(((tip.rotation * Vector3::z()) - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn insertion_translates_along_shaft() {
        let chain = psm_chain(&PsmParams::default());
        let home = forward_kinematics(&chain, &JointVector::zeros(ArmKind::Psm)).unwrap();
        let mut q = JointVector::zeros(ArmKind::Psm);
        q[2] = 0.1;
        let tip = forward_kinematics(&chain, &q).unwrap();
        let d = tip.translation.vector - home.translation.vector;
        assert!((d - Vector3::new(0.0, 0.0, -0.1)).norm() < 1e-12);
        assert!(tip.rotation.angle_to(&home.rotation) < 1e-12);
    }

    #[test]
    fn first_joint_rotates_about_base_x() {
        let chain = psm_chain(&PsmParams::default());
        let mut q = JointVector::zeros(ArmKind::Psm);
        q[2] = 0.05;
        let home = forward_kinematics(&chain, &q).unwrap();
        q[0] = FRAC_PI_2;
        let moved = forward_kinematics(&chain, &q).unwrap();
        let r = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2);
        assert!((moved.translation.vector - r * home.translation.vector).norm() < 1e-12);
        assert!(moved.rotation.angle_to(&(r * home.rotation)) < 1e-12);
    }

    #[test]
    fn tool_offset_composes_along_tip_z() {
        let mut chain = psm_chain(&PsmParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        chain.tip_to_tool = Pose::identity();
        let q = random_q(&chain, &mut rng);
        let tip = forward_kinematics(&chain, &q).unwrap();
        assert_eq!(tool_pose(&chain, &q).unwrap(), tip);

        chain.tip_to_tool = Isometry3::translation(0.0, 0.0, 0.005);
        let tool = tool_pose(&chain, &q).unwrap();
        let expected = tip.translation.vector + 0.005 * (tip.rotation * Vector3::z());
        assert!((tool.translation.vector - expected).norm() < 1e-12);
        let back = tool * chain.tip_to_tool.inverse();
        assert!((back.translation.vector - tip.translation.vector).norm() < 1e-12);
    }

    #[test]
    fn shaft_line_passes_through_rcm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for chain in [psm_chain(&PsmParams::default()), ecm_chain(&EcmParams::default())] {
            for _ in 0..500 {
                let q = random_q(&chain, &mut rng);
                // Frame after the insertion joint: origin on the shaft, z along it.
                let mut t = chain.link_transforms[0];
                for i in 0..3 {
                    t = t * joint_motion(chain.joint_types[i], q[i]) * chain.link_transforms[i + 1];
                }
                let o = t.translation.vector;
                let dir = t.rotation * Vector3::z();
                let dist = (o - dir * o.dot(&dir)).norm();
                assert!(dist < 1e-9, "shaft misses RCM by {dist}");
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for chain in [psm_chain(&PsmParams::default()), ecm_chain(&EcmParams::default())] {
            for _ in 0..100 {
                let q = random_q(&chain, &mut rng);
                let j = jacobian(&chain, &q).unwrap();
                for i in 0..chain.dof() {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[i] += h;
                    qm[i] -= h;
                    let tp = tool_pose(&chain, &qp).unwrap();
                    let tm = tool_pose(&chain, &qm).unwrap();
                    let lin = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
                    let ang = (tp.rotation * tm.rotation.inverse()).scaled_axis() / (2.0 * h);
                    let fd = Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z);
                    let dev = (fd - j.column(i)).abs().max();
                    assert!(dev < 1e-5, "column {i} deviates by {dev}");
                }
            }
        }
    }

    #[test]
    fn prismatic_column_is_pure_translation() {
        let chain = psm_chain(&PsmParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_q(&chain, &mut rng);
        let j = jacobian(&chain, &q).unwrap();
        let col = j.column(2);
        assert!((col.fixed_rows::<3>(0).norm() - 1.0).abs() < 1e-12);
        assert!(col.fixed_rows::<3>(3).norm() < 1e-15);
    }

    #[test]
    fn wrist_at_rcm_is_singular() {
        // With zero insertion the pitch axis passes through the RCM and lies in
        // the plane spanned by the first two axes, so its twist is dependent.
        let chain = psm_chain(&PsmParams::default());
        let q = JointVector::new(ArmKind::Psm, vec![0.0, 0.0, 0.0, 0.3, 0.2, -0.1]).unwrap();
        let svd = jacobian(&chain, &q).unwrap().svd(false, false);
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
        assert!(rank < 6, "singular values {:?}", svd.singular_values);
    }

    #[test]
    fn ecm_roll_moves_orientation_only() {
        let chain = ecm_chain(&EcmParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let mut q = random_q(&chain, &mut rng);
            let a = tool_pose(&chain, &q).unwrap();
            q[3] = rng.random_range(chain.limits[3][0]..chain.limits[3][1]);
            let b = tool_pose(&chain, &q).unwrap();
            assert!((a.translation.vector - b.translation.vector).norm() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let chain = psm_chain(&PsmParams::default());
        let text = chain.to_json().unwrap();
        let back = ChainSpec::from_json(&text).unwrap();
        assert_eq!(back.joint_types, chain.joint_types);
        for (a, b) in back.link_transforms.iter().zip(&chain.link_transforms) {
            assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-12);
        }
        let mut doc: ChainDocument = chain.clone().into();
        doc.joint_types.swap(0, 2);
        assert!(ChainSpec::try_from(doc).is_err());
    }
}
