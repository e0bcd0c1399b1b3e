//! Waypoint-based scripted policies for the PSM tasks, a null-space visual
//! servo for the ECM tasks, and demonstration files.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix1x4, Matrix2x4, Matrix6x4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{
    compute_reward, ecm_arm_model, CameraModel, Observation, TaskConfig, TaskEnv, TaskId, TransitionRecord, IMAGE_CENTER,
};
use crate::error::{Result, SimError};
use crate::kinematics::{jacobian, tool_pose, JointVector, Pose};
use crate::physics::GraspMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JawAction {
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointLabel {
    Approach,
    Pick,
    Lift,
    Handover,
    Place,
    Release,
}

/// How the waypoint position is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The tool moves to the pose.
    Tool,
    /// The held object moves to the pose position; the tool follows.
    Carry,
    /// The tool stays where it is.
    Stay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub tool_pose: Pose,
    pub jaw: JawAction,
    /// Position tolerance, meters.
    pub tolerance: f64,
    pub label: WaypointLabel,
    pub reference: Reference,
    /// Steps to hold once reached before advancing.
    pub dwell: usize,
}

impl Waypoint {
    fn new(p: Vector3<f64>, yaw: f64, jaw: JawAction, label: WaypointLabel) -> Self {
        Self {
            tool_pose: Pose::from_parts(p.into(), crate::envs::tool_rotation(yaw, 0.0)),
            jaw,
            tolerance: 1e-3,
            label,
            reference: Reference::Tool,
            dwell: 0,
        }
    }

    fn tol(mut self, t: f64) -> Self {
        self.tolerance = t;
        self
    }

    fn dwell(mut self, n: usize) -> Self {
        self.dwell = n;
        self
    }

    fn carry(mut self) -> Self {
        self.reference = Reference::Carry;
        self
    }

    fn stay(jaw: JawAction, label: WaypointLabel) -> Self {
        Self {
            reference: Reference::Stay,
            ..Self::new(Vector3::zeros(), 0.0, jaw, label)
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.tool_pose.translation.vector
    }

    pub fn yaw(&self) -> f64 {
        crate::kinematics::tool_yaw(&self.tool_pose.rotation)
    }
}

/// Gains and limits of the image-based camera controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    pub gain: f64,
    pub roll_gain: f64,
    /// Per-step bounds on translation (m) and roll (rad).
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            gain: 0.6,
            roll_gain: 0.6,
            max_translation: 0.005,
            max_rotation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Synchronized per-arm waypoint sequences (one inner list per arm).
    Waypoints(Vec<Vec<Waypoint>>),
    /// Straight-line camera reach.
    CameraReach { goal: Vector3<f64> },
    /// Roll the camera until the misorientation vanishes.
    RollAlign,
    /// Visual servoing on the tracked target.
    Servo(ServoConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub task: TaskId,
    pub kind: PolicyKind,
    /// Active stage; never decreases.
    pub index: usize,
    /// Fraction of the remaining error covered per step before clipping.
    pub gain: f64,
    held: usize,
    translation_scale: f64,
    rotation_scale: f64,
    camera: CameraModel,
}

fn wrap_pi(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

/// Observation slices for PSM tasks.
struct PsmObs<'a> {
    o: &'a [f64],
    arms: usize,
}

impl PsmObs<'_> {
    fn tool(&self, arm: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.o[5 * arm..5 * arm + 3])
    }
    fn angle(&self, arm: usize) -> f64 {
        self.o[5 * arm + 3]
    }
    fn object(&self) -> Vector3<f64> {
        let k = 5 * self.arms;
        Vector3::from_column_slice(&self.o[k..k + 3])
    }
}

/// Builds the scripted policy for the env's current episode.
pub fn plan_waypoints(env: &TaskEnv) -> Result<ScriptedPolicy> {
    let task = env.task();
    let cfg = env.config();
    let kind = match task {
        TaskId::EcmReach => {
            let g = env.goal();
            PolicyKind::CameraReach {
                goal: Vector3::new(g[0], g[1], g[2]),
            }
        }
        TaskId::MisOrient => PolicyKind::RollAlign,
        TaskId::StaticTrack | TaskId::ActiveTrack => PolicyKind::Servo(ServoConfig::default()),
        _ => PolicyKind::Waypoints(psm_waypoints(env)?),
    };
    Ok(ScriptedPolicy {
        task,
        kind,
        index: 0,
        gain: 1.0,
        held: 0,
        translation_scale: cfg.translation_scale,
        rotation_scale: cfg.rotation_scale,
        camera: env.camera().clone(),
    })
}

fn psm_waypoints(env: &TaskEnv) -> Result<Vec<Vec<Waypoint>>> {
    use JawAction::{Close, Open};
    use WaypointLabel::*;
    let task = env.task();
    let goal = env.goal();
    let goal3 = Vector3::new(goal[0], goal[1], goal[2]);
    let bounds = env.tool_bounds();
    if task != TaskId::NeedleReach && !bounds.contains(&goal3) {
        return Err(SimError::NoFeasiblePlan(format!("goal {goal3:?} is outside the tool workspace")));
    }
    let up = |h: f64| Vector3::new(0.0, 0.0, h);
    let hover = crate::envs::HOVER;
    let grasp = |arm: usize| {
        env.grasp_target(arm)
            .ok_or_else(|| SimError::NoFeasiblePlan(format!("{task} has no grasp target")))
    };
    let plan = match task {
        TaskId::NeedleReach => vec![vec![Waypoint::new(goal3, 0.0, Close, Approach).tol(5e-4)]],
        TaskId::GauzeRetrieve | TaskId::NeedlePick => {
            let (g, grip_yaw) = grasp(0)?;
            let yaw = if task == TaskId::GauzeRetrieve { 0.0 } else { grip_yaw };
            vec![vec![
                Waypoint::new(g + up(hover), yaw, Open, Approach),
                Waypoint::new(g, yaw, Open, Pick).tol(5e-4),
                Waypoint::new(g, yaw, Close, Pick).tol(5e-4).dwell(5),
                Waypoint::new(g + up(0.015), yaw, Close, Lift),
                Waypoint::new(goal3, yaw, Close, Place).carry().tol(5e-4),
            ]]
        }
        TaskId::PegTransfer => {
            let (g, yaw) = grasp(0)?;
            let clear = env.lift_clearance() + 0.002;
            vec![vec![
                Waypoint::new(g + up(hover), yaw, Open, Approach),
                Waypoint::new(g, yaw, Open, Pick).tol(5e-4),
                Waypoint::new(g, yaw, Close, Pick).tol(5e-4).dwell(5),
                Waypoint::new(g + up(clear), yaw, Close, Lift),
                Waypoint::new(goal3 + up(clear), yaw, Close, Place).carry().tol(5e-4),
                Waypoint::new(goal3 + up(0.0005), yaw, Close, Place).carry().tol(3e-4),
                Waypoint::stay(Open, Release).dwell(3),
            ]]
        }
        TaskId::BiPegTransfer => {
            // PSM2 already holds the block; lift it, hand it to PSM1 above
            // the start peg, and let PSM1 seat it on the target peg.
            let (g1, yaw1) = grasp(0)?;
            let (g2, yaw2) = grasp(1)?;
            let lift = if env.holds_object(1) && env.world().bodies[env.object().unwrap()].aabb().unwrap().0.z
                > env.world().support_height + env.lift_clearance() * 0.5
            {
                0.0
            } else {
                env.lift_clearance() + 0.002
            };
            let mut psm1 = vec![
                Waypoint::new(g1 + up(lift + hover), yaw1, Open, Approach),
                Waypoint::new(g1 + up(lift), yaw1, Open, Handover).tol(5e-4),
                Waypoint::new(g1 + up(lift), yaw1, Close, Handover).tol(5e-4).dwell(5),
                Waypoint::stay(Close, Handover),
                Waypoint::stay(Close, Handover),
                Waypoint::new(goal3 + up(env.lift_clearance() + 0.002), yaw1, Close, Place).carry().tol(5e-4),
                Waypoint::new(goal3 + up(0.0005), yaw1, Close, Place).carry().tol(3e-4),
                Waypoint::stay(Open, Release).dwell(3),
            ];
            let mut psm2 = vec![
                Waypoint::new(g2 + up(lift), yaw2, Close, Lift),
                Waypoint::stay(Close, Handover),
                Waypoint::stay(Close, Handover),
                Waypoint::stay(Open, Release).dwell(3),
                // Clear the hole before PSM1 moves the block.
                Waypoint::new(g2 + up(lift + 0.012), yaw2, Open, Release),
                Waypoint::stay(Open, Release),
                Waypoint::stay(Open, Release),
                Waypoint::stay(Open, Release),
            ];
            if !env.holds_object(1) {
                // Not pre-grasped: PSM2 picks first while PSM1 waits.
                let pick = [
                    Waypoint::new(g2 + up(hover), yaw2, Open, Approach),
                    Waypoint::new(g2, yaw2, Open, Pick).tol(5e-4),
                    Waypoint::new(g2, yaw2, Close, Pick).tol(5e-4).dwell(5),
                ];
                let start = env.world().tool_pose(env.psms()[0]).translation.vector;
                for (k, wp) in pick.into_iter().enumerate() {
                    psm2.insert(k, wp);
                    psm1.insert(k, Waypoint::new(start, 0.0, Open, Approach).tol(2e-3));
                }
            }
            vec![psm1, psm2]
        }
        TaskId::NeedleRegrasp => {
            let (g1, yaw1) = grasp(0)?;
            vec![
                vec![
                    Waypoint::new(g1 + up(hover), yaw1, Open, Approach),
                    Waypoint::new(g1, yaw1, Open, Handover).tol(4e-4),
                    Waypoint::new(g1, yaw1, Close, Handover).tol(4e-4).dwell(5),
                    Waypoint::stay(Close, Handover),
                    Waypoint::stay(Close, Handover),
                    Waypoint::new(goal3, yaw1, Close, Place).carry().tol(5e-4),
                ],
                {
                    let here = env.world().tool_pose(env.psms()[1]);
                    let p = here.translation.vector;
                    let yaw = crate::kinematics::tool_yaw(&here.rotation);
                    // Back off against the direction the needle will travel.
                    let center = env.world().bodies[env.object().expect("needle")].pose.translation.vector;
                    let mut away = center - goal3;
                    away.z = 0.0;
                    let away = if away.norm() > 1e-9 { away.normalize() } else { Vector3::x() };
                    let retreat = bounds.clamp(&(p + away * 0.02 + up(0.005)));
                    vec![
                        Waypoint::new(p, yaw, Close, Handover).tol(4e-4),
                        Waypoint::new(p, yaw, Close, Handover).tol(4e-4),
                        Waypoint::new(p, yaw, Close, Handover).tol(4e-4),
                        Waypoint::stay(Open, Release).dwell(3),
                        Waypoint::new(retreat, yaw, Open, Release).tol(2e-3),
                        Waypoint::stay(Open, Release),
                    ]
                },
            ]
        }
        _ => unreachable!("ECM tasks use camera policies"),
    };
    Ok(plan)
}

impl ScriptedPolicy {
    /// Number of waypoint stages (0 for camera policies).
    pub fn stages(&self) -> usize {
        match &self.kind {
            PolicyKind::Waypoints(arms) => arms.first().map(Vec::len).unwrap_or(0),
            _ => 0,
        }
    }

    pub fn is_exhausted(&self) -> bool {
        matches!(&self.kind, PolicyKind::Waypoints(arms) if arms.iter().all(Vec::is_empty))
    }

    /// Next action in the env's action coordinates, clipped to `[-1, 1]`.
    pub fn act(&mut self, obs: &Observation) -> Result<Vec<f64>> {
        match self.kind.clone() {
            PolicyKind::Waypoints(arms) => Ok(self.act_waypoints(&arms, obs)),
            PolicyKind::CameraReach { goal } => {
                let cam = Vector3::from_column_slice(&obs.observation[0..3]);
                Ok(((goal - cam) * self.gain / self.translation_scale)
                    .iter()
                    .map(|v| v.clamp(-1.0, 1.0))
                    .collect())
            }
            PolicyKind::RollAlign => {
                // The misorientation drops by the roll increment.
                let theta = obs.observation[7];
                Ok(vec![(self.gain * theta / self.rotation_scale).clamp(-1.0, 1.0)])
            }
            PolicyKind::Servo(cfg) => {
                let o = &obs.observation;
                let q = JointVector {
                    values: o[3..7].to_vec(),
                    arm: crate::kinematics::ArmKind::Ecm,
                };
                let p_err = Vector2::new(o[10], o[11]) - IMAGE_CENTER;
                let (depth, theta) = (o[12], o[13]);
                let twist = match visual_servo_ecm(&self.camera, &q, &p_err, theta, depth, &cfg) {
                    Ok(t) => t,
                    Err(SimError::TargetOutOfView) => Vector4::zeros(),
                    Err(e) => return Err(e),
                };
                Ok(vec![
                    (twist[0] / self.translation_scale).clamp(-1.0, 1.0),
                    (twist[1] / self.translation_scale).clamp(-1.0, 1.0),
                    (twist[2] / self.translation_scale).clamp(-1.0, 1.0),
                    (twist[3] / self.rotation_scale).clamp(-1.0, 1.0),
                ])
            }
        }
    }

    fn act_waypoints(&mut self, arms: &[Vec<Waypoint>], obs: &Observation) -> Vec<f64> {
        let per_arm = self.task.arm_components();
        let view = PsmObs {
            o: &obs.observation,
            arms: arms.len(),
        };
        let mut action = vec![0.0; per_arm.len() * arms.len()];
        if self.is_exhausted() {
            return action;
        }
        let stage = self.index.min(self.stages() - 1);
        let mut all_reached = true;
        let mut dwell = 0;
        for (arm, seq) in arms.iter().enumerate() {
            let wp = &seq[stage];
            let tool = view.tool(arm);
            let target = match wp.reference {
                Reference::Tool => wp.position(),
                Reference::Carry => tool + (wp.position() - view.object()),
                Reference::Stay => tool,
            };
            let err = target - tool;
            let yaw_err = if wp.reference == Reference::Stay {
                0.0
            } else {
                wrap_pi(wp.yaw() - view.angle(arm))
            };
            let block = &mut action[arm * per_arm.len()..(arm + 1) * per_arm.len()];
            for (c, a) in per_arm.iter().zip(block.iter_mut()) {
                use crate::envs::ActionComponent as C;
                *a = match c {
                    C::Dx => self.gain * err.x / self.translation_scale,
                    C::Dy => self.gain * err.y / self.translation_scale,
                    C::Dz => self.gain * err.z / self.translation_scale,
                    C::DYaw => self.gain * yaw_err / self.rotation_scale,
                    C::Jaw => match wp.jaw {
                        JawAction::Open => 1.0,
                        JawAction::Close => -1.0,
                    },
                    _ => 0.0,
                }
                .clamp(-1.0, 1.0);
            }
            let yaw_ok = !per_arm.contains(&crate::envs::ActionComponent::DYaw) || yaw_err.abs() <= 0.02;
            all_reached &= err.norm() <= wp.tolerance && yaw_ok;
            dwell = dwell.max(wp.dwell);
        }
        // Advance once every arm has reached its waypoint and held it long enough.
        if all_reached {
            if self.held >= dwell && self.index + 1 < self.stages() {
                self.index += 1;
                self.held = 0;
            } else {
                self.held += 1;
            }
        }
        action
    }
}

/// Camera displacement `(dx, dy, dz, droll)` for one step that drives the
/// target toward the image center, with the roll correction of `θ*` acting
/// only in the null space of the image task.
///
/// The image Jacobian accounts for the RCM constraint: a commanded camera
/// displacement is realized through the ECM joints, which also rotates the
/// camera about its x and y axes.
pub fn visual_servo_ecm(
    camera: &CameraModel,
    q: &JointVector,
    p_err: &Vector2<f64>,
    theta_star: f64,
    depth: f64,
    cfg: &ServoConfig,
) -> Result<Vector4<f64>> {
    let uv = IMAGE_CENTER + p_err;
    if !(depth > 0.0) || !(0.0..=1.0).contains(&uv.x) || !(0.0..=1.0).contains(&uv.y) {
        return Err(SimError::TargetOutOfView);
    }
    if p_err.norm() == 0.0 && theta_star == 0.0 {
        return Ok(Vector4::zeros());
    }
    let realized = realized_twist_map(q)?;
    let x = p_err.x / camera.fx;
    let y = p_err.y / camera.fy;
    let z = depth;
    // Interaction matrix of a point for the camera twist (v, ω), scaled to
    // normalized image units.
    #[rustfmt::skip]
    let l = nalgebra::Matrix2x6::new(
        -1.0 / z, 0.0, x / z, x * y, -(1.0 + x * x), y,
        0.0, -1.0 / z, y / z, 1.0 + y * y, -x * y, -x,
    );
    let scale = nalgebra::Matrix2::new(camera.fx, 0.0, 0.0, camera.fy);
    let j1: Matrix2x4<f64> = scale * l * realized;

    // Misorientation rate with respect to camera rotation.
    let cam_rot = ecm_arm_model(q)?.tool_pose_world().rotation * camera.tool_to_camera.rotation;
    let n = cam_rot.inverse() * camera.nls_reference;
    let planar = n.x * n.x + n.y * n.y;
    // dn/dt = -ω × n = n × ω; θ = atan2(n_x, -n_y).
    let dtheta_dn = Vector3::new(-n.y / planar, n.x / planar, 0.0);
    let dn_dw = n.cross_matrix();
    let j2_w = dtheta_dn.transpose() * dn_dw;
    let mut j2_full = nalgebra::Matrix1x6::zeros();
    j2_full.fixed_view_mut::<1, 3>(0, 3).copy_from(&j2_w);
    let j2: Matrix1x4<f64> = j2_full * realized;

    // Both tasks are solved in units of the per-step bounds, so meters and
    // radians are traded by how much of their budget they use.
    let scale = nalgebra::Matrix4::from_diagonal(&Vector4::new(
        cfg.max_translation,
        cfg.max_translation,
        cfg.max_translation,
        cfg.max_rotation,
    ));
    let j1d = DMatrix::from_column_slice(2, 4, (j1 * scale).as_slice());
    let j1_pinv = j1d.clone().pseudo_inverse(1e-12).map_err(|e| SimError::Contract(e.to_string()))?;
    let u1 = &j1_pinv * DMatrix::from_column_slice(2, 1, (-cfg.gain * p_err).as_slice());
    let u1 = Vector4::new(u1[0], u1[1], u1[2], u1[3]);
    // Saturate in priority order: the image task first, then the roll task
    // within whatever budget is left.
    let u1 = u1 / unit_ratio(&u1).max(1.0);
    let null = DMatrix::identity(4, 4) - &j1_pinv * &j1d;
    let j2s = j2 * scale;
    let j2n = DMatrix::from_column_slice(1, 4, j2s.as_slice()) * &null;
    let residual = -cfg.roll_gain * theta_star - (j2s * u1)[(0, 0)];
    // Damped so a nearly singular roll task cannot demand huge motion.
    let damping = 1e-3;
    let u2 = &null * j2n.transpose() * (residual / (j2n.norm_squared() + damping * damping));
    let u2 = Vector4::new(u2[0], u2[1], u2[2], u2[3]);
    let alpha = if unit_ratio(&(u1 + u2)) <= 1.0 {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if unit_ratio(&(u1 + u2 * mid)) > 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    };
    let twist = scale * (u1 + u2 * alpha);
    Ok(twist)
}

/// Largest bound usage of a displacement expressed in bound units.
fn unit_ratio(u: &Vector4<f64>) -> f64 {
    u.fixed_rows::<3>(0).norm().max(u[3].abs())
}

/// Full camera twist (linear, angular; camera frame) produced by a commanded
/// `(dx, dy, dz, droll)` once resolved through the ECM joints.
fn realized_twist_map(q: &JointVector) -> Result<Matrix6x4<f64>> {
    let arm = ecm_arm_model(q)?;
    let chain = &arm.chain;
    let j = jacobian(chain, q)?;
    let rt = tool_pose(chain, q)?.rotation.to_rotation_matrix().matrix().transpose();
    let mut cam = Matrix6x4::zeros();
    for c in 0..4 {
        let lin = rt * Vector3::new(j[(0, c)], j[(1, c)], j[(2, c)]);
        let ang = rt * Vector3::new(j[(3, c)], j[(4, c)], j[(5, c)]);
        for r in 0..3 {
            cam[(r, c)] = lin[r];
            cam[(r + 3, c)] = ang[r];
        }
    }
    let mut m = nalgebra::Matrix4::zeros();
    for c in 0..4 {
        for r in 0..3 {
            m[(r, c)] = cam[(r, c)];
        }
        m[(3, c)] = cam[(5, c)];
    }
    let a = m * m.transpose() + nalgebra::Matrix4::identity() * 1e-8;
    let inv = a
        .try_inverse()
        .ok_or_else(|| SimError::Contract("camera Jacobian is singular".into()))?;
    Ok(cam * (m.transpose() * inv))
}

/// Runs one scripted episode; returns the transitions.
pub fn rollout(env: &mut TaskEnv, seed: u64) -> Result<Vec<TransitionRecord>> {
    let mut obs = env.reset(seed)?;
    let mut policy = plan_waypoints(env)?;
    let mut out = Vec::with_capacity(env.config().horizon);
    for t in 0..env.config().horizon {
        let action = policy.act(&obs)?;
        let step = env.step(&action)?;
        out.push(TransitionRecord {
            t,
            obs: obs.clone(),
            action,
            reward: step.reward,
            next_obs: step.obs.clone(),
            done: step.done,
            is_success: step.info.is_success,
        });
        obs = step.obs;
        if step.done {
            break;
        }
    }
    Ok(out)
}

/// Stable hash of a task configuration.
pub fn env_config_hash(config: &TaskConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub task: TaskId,
    pub env_config_hash: String,
    pub seeds: Vec<u64>,
    pub grasp_mode: GraspMode,
    /// SHA-256 over the transition lines that follow the header.
    pub payload_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DemoLine {
    episode: usize,
    #[serde(flatten)]
    record: TransitionRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub header: DemoHeader,
    pub episodes: Vec<Vec<TransitionRecord>>,
}

impl DemoSet {
    /// Wraps recorded episodes (one per seed) with a fresh header.
    pub fn from_episodes(config: &TaskConfig, seeds: Vec<u64>, episodes: Vec<Vec<TransitionRecord>>) -> Result<Self> {
        if seeds.len() != episodes.len() {
            return Err(SimError::DimensionMismatch {
                expected: seeds.len(),
                got: episodes.len(),
            });
        }
        let payload = payload_lines(&episodes)?;
        Ok(DemoSet {
            header: DemoHeader {
                task: config.task,
                env_config_hash: env_config_hash(config)?,
                seeds,
                grasp_mode: config.grasp_mode,
                payload_hash: hex::encode(Sha256::digest(payload.as_bytes())),
            },
            episodes,
        })
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }
}

fn payload_lines(episodes: &[Vec<TransitionRecord>]) -> Result<String> {
    let mut out = String::new();
    for (episode, ep) in episodes.iter().enumerate() {
        for record in ep {
            out.push_str(&serde_json::to_string(&DemoLine {
                episode,
                record: record.clone(),
            })?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Runs the scripted policy from successive seeds, keeping successful
/// episodes until `n_episodes` are collected or `3 * n_episodes` have been tried.
pub fn collect_demos(env: &mut TaskEnv, n_episodes: usize, first_seed: u64) -> Result<DemoSet> {
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut seeds = Vec::with_capacity(n_episodes);
    let attempts = 3 * n_episodes;
    for k in 0..attempts as u64 {
        if episodes.len() == n_episodes {
            break;
        }
        let seed = first_seed + k;
        let ep = rollout(env, seed)?;
        if ep.last().is_some_and(|r| r.is_success) {
            episodes.push(ep);
            seeds.push(seed);
        }
    }
    if episodes.len() < n_episodes {
        return Err(SimError::InsufficientSuccess {
            successes: episodes.len(),
            attempts,
            needed: n_episodes,
        });
    }
    DemoSet::from_episodes(env.config(), seeds, episodes)
}

pub fn write_demos(path: &Path, demos: &DemoSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &demos.header)?;
    f.write_all(b"\n")?;
    f.write_all(payload_lines(&demos.episodes)?.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Parses a demo file without validating it. The flag reports whether the
/// payload still matches the hash recorded in the header.
pub fn read_demo_file(path: &Path) -> Result<(DemoSet, bool)> {
    let text = std::fs::read_to_string(path)?;
    let (head, body) = text
        .split_once('\n')
        .ok_or_else(|| SimError::DemoRejected("missing header line".into()))?;
    let header: DemoHeader =
        serde_json::from_str(head).map_err(|e| SimError::DemoRejected(format!("bad header: {e}")))?;
    let intact = hex::encode(Sha256::digest(body.as_bytes())) == header.payload_hash;
    let mut episodes: Vec<Vec<TransitionRecord>> = vec![Vec::new(); header.seeds.len()];
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let l: DemoLine = serde_json::from_str(line).map_err(|e| SimError::DemoRejected(e.to_string()))?;
        episodes
            .get_mut(l.episode)
            .ok_or_else(|| SimError::DemoRejected(format!("episode index {} out of range", l.episode)))?
            .push(l.record);
    }
    Ok((DemoSet { header, episodes }, intact))
}

/// Loads a demo file, rejecting it if its contents or its environment
/// configuration do not match.
pub fn load_demos(path: &Path, config: &TaskConfig) -> Result<DemoSet> {
    let (demos, intact) = read_demo_file(path)?;
    if !intact {
        return Err(SimError::DemoRejected("payload hash mismatch".into()));
    }
    if demos.header.env_config_hash != env_config_hash(config)? {
        return Err(SimError::DemoRejected("recorded for a different environment configuration".into()));
    }
    Ok(demos)
}

/// Replays stored actions from stored seeds; true when every reward matches bit for bit.
pub fn replay_matches(env: &mut TaskEnv, demos: &DemoSet) -> Result<bool> {
    for (seed, ep) in demos.header.seeds.iter().zip(&demos.episodes) {
        env.reset(*seed)?;
        for r in ep {
            let step = env.step(&r.action)?;
            if step.reward.to_bits() != r.reward.to_bits() {
                return Ok(false);
            }
            let recomputed = compute_reward(env.config(), &step.obs.achieved_goal, &step.obs.desired_goal)?;
            if env.task().is_goal_based() && recomputed.to_bits() != r.reward.to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
