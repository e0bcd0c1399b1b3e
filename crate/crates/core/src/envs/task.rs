use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::path::{generate_target_path, TargetPath};
use super::{
    compute_reward, ActionComponent, ActionSpec, ArmSet, EnvSpec, InitStage, Observation, StepInfo, StepResult,
    TaskConfig, TaskId, IMAGE_CENTER,
};
use crate::assets::{default_scene, needle_arc_point, spawn_scene, ObjectSpec, SceneSpec, Workspace};
use crate::error::{Result, SimError};
use crate::kinematics::{
    ecm_chain, inverse_kinematics_position, jacobian, psm_chain, tool_pose, top_down, tool_yaw, ArmKind, ArmModel,
    EcmParams, IkConfig, JointVector, Pose, PsmParams,
};
use crate::physics::{ArmCommand, GraspPhase, JawGeometry, World, WorldConfig};

const PSM_RCM_HEIGHT: f64 = 0.2;
/// Lateral RCM offset of each arm in bimanual tasks.
const BIMANUAL_RCM_OFFSET: f64 = 0.06;
const PITCH_LIMIT: f64 = 0.6;
/// Height of the block grasp point above the block's bottom face.
const BLOCK_GRASP_HEIGHT: f64 = 0.0015;
/// Hover height above a grasp point for the approach stage.
pub const HOVER: f64 = 0.008;
const ECM_OUTER_LIMIT: f64 = 0.45;

/// Commanded tool orientation of one PSM.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmFrame {
    pub yaw: f64,
    pub pitch: f64,
}

/// Top-down orientation with yaw about world z, then pitch about the tool x axis.
pub fn tool_rotation(yaw: f64, pitch: f64) -> UnitQuaternion<f64> {
    top_down(yaw) * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch)
}

fn tool_pitch(rotation: &UnitQuaternion<f64>) -> f64 {
    let yaw = tool_yaw(rotation);
    let z = rotation * Vector3::z();
    let side = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
    z.dot(&side).atan2(-z.z)
}

/// Wraps an angle into `(-period/2, period/2]`.
fn wrap(angle: f64, period: f64) -> f64 {
    let mut a = angle.rem_euclid(period);
    if a > 0.5 * period {
        a -= period;
    }
    a
}

fn planar_yaw(pose: &Pose) -> f64 {
    let x = pose.rotation * Vector3::x();
    x.y.atan2(x.x)
}

pub(crate) fn ecm_rcm_pose() -> Pose {
    // Mounted behind the workspace, shaft aimed at its center at q = 0.
    let rcm = Vector3::new(0.0, -0.2, 0.25);
    let tilt = 0.2f64.atan2(0.25);
    Pose::from_parts(rcm.into(), UnitQuaternion::from_axis_angle(&Vector3::x_axis(), tilt))
}

/// ECM arm model at joint configuration `q`.
pub fn ecm_arm_model(q: &JointVector) -> Result<ArmModel> {
    ArmModel::new(ecm_chain(&ecm_params()), ecm_rcm_pose(), q.clone())
}

fn psm_rcm_pose(task: TaskId, arm: usize) -> Pose {
    let x = match (task.arms(), arm) {
        (ArmSet::Bimanual, 0) => BIMANUAL_RCM_OFFSET,
        (ArmSet::Bimanual, _) => -BIMANUAL_RCM_OFFSET,
        _ => 0.0,
    };
    // Turned so zero roll gives zero task yaw, centering yaw in the roll range.
    Pose::from_parts(
        Vector3::new(x, 0.0, PSM_RCM_HEIGHT).into(),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI),
    )
}

fn psm_home() -> JointVector {
    JointVector {
        values: vec![0.0, 0.0, 0.15, 0.0, 0.0, 0.0],
        arm: ArmKind::Psm,
    }
}

fn ecm_params() -> EcmParams {
    EcmParams {
        limits_outer: [-ECM_OUTER_LIMIT, ECM_OUTER_LIMIT],
        ..EcmParams::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// IK for a world-frame tool pose; falls back to the best iterate when the
/// target cannot be met exactly.
fn solve_pose(arm: &ArmModel, target: &Pose, ik: &IkConfig) -> Result<JointVector> {
    match arm.solve_world(target, ik) {
        Ok(sol) => Ok(sol.q),
        Err(SimError::UnreachableTarget { best, .. }) => Ok(best),
        Err(e) => Err(e),
    }
}

fn solve_position(arm: &ArmModel, target: &Vector3<f64>, locked: &[usize], ik: &IkConfig) -> Result<JointVector> {
    let local = arm.rcm_pose.inverse_transform_point(&(*target).into()).coords;
    match inverse_kinematics_position(&arm.chain, &local, &arm.current_q, locked, ik) {
        Ok(sol) => Ok(sol.q),
        Err(SimError::UnreachableTarget { best, .. }) => Ok(best),
        Err(e) => Err(e),
    }
}

/// One task environment. Single owner; clone to fork.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    config: TaskConfig,
    scene_spec: SceneSpec,
    action_spec: ActionSpec,
    world: World,
    camera: CameraModel,
    psms: Vec<usize>,
    ecm: Option<usize>,
    object: Option<usize>,
    target_cube: Option<usize>,
    frames: Vec<ArmFrame>,
    goal: Vec<f64>,
    pegs: Vec<Vector3<f64>>,
    target_peg: Option<usize>,
    path: Option<TargetPath>,
    tool_bounds: Workspace,
    ik: IkConfig,
    steps: usize,
    lost_steps: usize,
    ever_stabilized: bool,
    started: bool,
    finished: bool,
    seed: u64,
    obs_dim: usize,
}

impl TaskEnv {
    pub fn new(config: TaskConfig) -> Result<Self> {
        config.validate()?;
        let scene_spec = match &config.scene {
            Some(s) => s.clone(),
            None => default_scene(config.task.scene_name())?,
        };
        let action_spec = ActionSpec::for_task(&config);
        let mut env = Self {
            world: World::new(WorldConfig::default())?,
            scene_spec,
            action_spec,
            camera: CameraModel::default(),
            psms: Vec::new(),
            ecm: None,
            object: None,
            target_cube: None,
            frames: Vec::new(),
            goal: Vec::new(),
            pegs: Vec::new(),
            target_peg: None,
            path: None,
            tool_bounds: Workspace {
                min: Vector3::zeros(),
                max: Vector3::zeros(),
            },
            ik: IkConfig::default(),
            steps: 0,
            lost_steps: 0,
            ever_stabilized: false,
            started: false,
            finished: false,
            seed: 0,
            obs_dim: 0,
            config,
        };
        // Build once to learn the observation size; stepping still needs a reset.
        let obs = env.reset(0)?;
        env.obs_dim = obs.observation.len();
        env.started = false;
        Ok(env)
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn task(&self) -> TaskId {
        self.config.task
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            task: self.config.task,
            obs_dim: self.obs_dim,
            goal_dim: self.config.task.goal_dim(),
            action_dim: self.action_spec.dim(),
            horizon: self.config.horizon,
            action: self.action_spec.clone(),
        }
    }

    pub fn action_spec(&self) -> &ActionSpec {
        &self.action_spec
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    /// Replaces the sampled goal for the current episode.
    pub fn set_goal(&mut self, goal: Vec<f64>) -> Result<()> {
        if goal.len() != self.config.task.goal_dim() {
            return Err(SimError::DimensionMismatch {
                expected: self.config.task.goal_dim(),
                got: goal.len(),
            });
        }
        self.goal = goal;
        Ok(())
    }

    /// Instrument indices of the PSMs (PSM1 first).
    pub fn psms(&self) -> &[usize] {
        &self.psms
    }

    pub fn ecm(&self) -> Option<usize> {
        self.ecm
    }

    /// Body index of the manipulated object.
    pub fn object(&self) -> Option<usize> {
        self.object
    }

    pub fn target_cube(&self) -> Option<usize> {
        self.target_cube
    }

    pub fn pegs(&self) -> &[Vector3<f64>] {
        &self.pegs
    }

    pub fn target_peg(&self) -> Option<usize> {
        self.target_peg
    }

    pub fn tool_bounds(&self) -> &Workspace {
        &self.tool_bounds
    }

    pub fn frame(&self, arm: usize) -> ArmFrame {
        self.frames[arm]
    }

    pub fn ever_stabilized(&self) -> bool {
        self.ever_stabilized
    }

    pub fn target_path(&self) -> Option<&TargetPath> {
        self.path.as_ref()
    }

    /// Control period, seconds.
    pub fn control_dt(&self) -> f64 {
        self.world.config.dt_sub * self.world.config.substeps_per_control as f64
    }

    /// World pose of the ECM camera.
    pub fn camera_pose(&self) -> Option<Pose> {
        self.ecm.map(|e| self.camera.camera_pose(&self.world.tool_pose(e)))
    }

    /// Whether `arm`'s jaw holds the task object.
    pub fn holds_object(&self, arm: usize) -> bool {
        match (self.object, self.world.grasp_state(self.psms[arm])) {
            (Some(obj), Some(g)) => g.phase.body() == Some(obj),
            _ => false,
        }
    }

    pub fn is_pinch_hold(&self, arm: usize) -> bool {
        matches!(
            self.world.grasp_state(self.psms[arm]).map(|g| &g.phase),
            Some(GraspPhase::PinchHold { .. })
        )
    }

    /// Designated grasp point on the object for `arm`, and the tool yaw
    /// that lines the jaw up with it.
    pub fn grasp_target(&self, arm: usize) -> Option<(Vector3<f64>, f64)> {
        let obj = self.object?;
        let body = &self.world.bodies[obj];
        let pose = body.pose;
        let spec = self.object_spec()?;
        match spec {
            ObjectSpec::Needle { arc_length, .. } => {
                let fraction = if self.config.task == TaskId::NeedleRegrasp && arm == 0 {
                    0.75
                } else {
                    0.25
                };
                let (p, t) = needle_arc_point(arc_length, fraction);
                let tw = pose.rotation * t;
                Some((pose * nalgebra::Point3::from(p)).coords).map(|p| (p, wrap(tw.y.atan2(tw.x), PI)))
            }
            ObjectSpec::GauzePad { .. } => Some((pose.translation.vector, wrap(planar_yaw(&pose), FRAC_PI_2))),
            ObjectSpec::Block {
                outer_half, hole_half, ..
            } => {
                let c = 0.5 * (outer_half + hole_half);
                let yaw = planar_yaw(&pose);
                // Walls on local ±y are gripped with the tool x along local x.
                let (locals, grip_yaw) = if wrap(yaw, PI).abs() <= FRAC_PI_4 {
                    ([Vector3::new(0.0, c, 0.0), Vector3::new(0.0, -c, 0.0)], wrap(yaw, PI))
                } else {
                    ([Vector3::new(c, 0.0, 0.0), Vector3::new(-c, 0.0, 0.0)], wrap(yaw + FRAC_PI_2, PI))
                };
                let mut points = locals.map(|l| pose.rotation * l + pose.translation.vector);
                points.sort_by(|a, b| b.y.total_cmp(&a.y).then(b.x.total_cmp(&a.x)));
                let bottom = body.aabb().map(|(lo, _)| lo.z).unwrap_or(pose.translation.vector.z);
                let mut p = points[arm.min(1)];
                p.z = bottom + BLOCK_GRASP_HEIGHT;
                Some((p, grip_yaw))
            }
            _ => None,
        }
    }

    fn object_spec(&self) -> Option<ObjectSpec> {
        let name = &self.world.bodies[self.object?].name;
        self.scene_spec
            .objects
            .iter()
            .find(|o| &o.name == name)
            .map(|o| o.spec.clone())
    }

    /// Jaw half-angle at which closed pads just touch the object at its grasp point.
    fn touching_opening(&self, geometry: &JawGeometry) -> f64 {
        let half_width = match self.object_spec() {
            Some(ObjectSpec::Needle { wire_radius, .. }) => wire_radius,
            Some(ObjectSpec::Block {
                outer_half, hole_half, ..
            }) => 0.5 * (outer_half - hole_half),
            Some(ObjectSpec::GauzePad { half_extents, .. }) => half_extents.y,
            _ => 0.0,
        };
        (half_width / geometry.pad_length).clamp(0.0, 1.0).asin()
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let mut spec = self.scene_spec.clone();
        spec.rng_seed = seed;
        let world_config = WorldConfig {
            grasp_mode: self.config.grasp_mode,
            ..WorldConfig::default()
        };
        let scene = spawn_scene(&spec, world_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);

        let object = ["needle", "gauze", "block"].iter().find_map(|n| scene.object(n));
        let target_cube = scene.object("target");
        let start_peg = scene.seated_on.first().map(|(_, k)| *k);
        self.pegs = scene.pegs.clone();
        self.world = scene.world;
        self.seed = seed;
        self.steps = 0;
        self.lost_steps = 0;
        self.ever_stabilized = false;
        self.finished = false;
        self.psms.clear();
        self.frames.clear();
        self.ecm = None;
        self.object = None;
        self.target_cube = None;
        self.target_peg = None;
        self.path = None;

        let task = self.config.task;
        if task.is_ecm() {
            self.target_cube = target_cube;
            self.reset_ecm(&mut rng)?;
        } else {
            self.object = object;
            let obj = self
                .object
                .ok_or_else(|| SimError::Config(format!("{task} scene has no manipulated object")))?;
            self.world.graspable = vec![obj];
            self.reset_psm(&mut rng, start_peg)?;
        }
        self.started = true;
        self.observe()
    }

    fn add_psm(&mut self, name: &str, arm: usize) -> Result<usize> {
        let model = ArmModel::new(
            psm_chain(&PsmParams::default()),
            psm_rcm_pose(self.config.task, arm),
            psm_home(),
        )?;
        let idx = self.world.add_instrument(name, model, Some(JawGeometry::default()))?;
        self.psms.push(idx);
        self.frames.push(ArmFrame::default());
        Ok(idx)
    }

    /// Poses PSM `arm` at `position` with the given frame and jaw opening.
    fn place_psm(&mut self, arm: usize, position: Vector3<f64>, frame: ArmFrame, opening: f64, jaw_cmd: f64) -> Result<()> {
        let inst = self.psms[arm];
        let target = Pose::from_parts(position.into(), tool_rotation(frame.yaw, frame.pitch));
        let q = solve_pose(&self.world.instruments[inst].arm, &target, &self.ik)?;
        self.world.set_instrument_state(inst, &q, Some(opening))?;
        if let Some(jaw) = self.world.instruments[inst].jaw.as_mut() {
            jaw.command = jaw_cmd;
        }
        self.frames[arm] = frame;
        Ok(())
    }

    fn reset_psm(&mut self, rng: &mut ChaCha8Rng, start_peg: Option<usize>) -> Result<()> {
        let task = self.config.task;
        let support = self.world.support_height;
        self.tool_bounds = Workspace {
            min: Vector3::new(-0.05, -0.05, support),
            max: Vector3::new(0.05, 0.05, support + 0.1),
        };
        self.add_psm("psm1", 0)?;
        if task.arms() == ArmSet::Bimanual {
            self.add_psm("psm2", 1)?;
        }
        let geometry = JawGeometry::default();
        let open = geometry.max_half_angle;
        let obj = self.object.expect("object set before arms");

        match task {
            TaskId::NeedleRegrasp => {
                // The needle starts in PSM2's jaw, lifted above the tray.
                let lifted = Vector3::new(uniform(rng, -0.015, 0.015), uniform(rng, -0.015, 0.015), uniform(rng, 0.03, 0.045));
                self.world.bodies[obj].pose.translation.vector = lifted;
                let (g2, yaw2) = self.grasp_target(1).expect("needle grasp point");
                let touch = self.touching_opening(&geometry);
                self.place_psm(1, g2, ArmFrame { yaw: yaw2, pitch: 0.0 }, touch, -1.0)?;
                self.world.force_grasp(self.psms[1], obj)?;
                let (g1, yaw1) = self.grasp_target(0).expect("needle grasp point");
                let start = g1 + Vector3::new(uniform(rng, -0.01, 0.01), uniform(rng, -0.01, 0.01), uniform(rng, 0.015, 0.03));
                self.place_psm(0, start, ArmFrame { yaw: yaw1, pitch: 0.0 }, open, 1.0)?;
            }
            TaskId::BiPegTransfer => {
                let start = self.random_tool_start(rng, 0.02, Vector3::new(0.02, 0.0, 0.0));
                self.place_psm(0, start, ArmFrame::default(), open, 1.0)?;
                let (g2, yaw2) = self.grasp_target(1).expect("block grasp point");
                let frame = ArmFrame { yaw: yaw2, pitch: 0.0 };
                match self.config.init_stage {
                    InitStage::None => {
                        let start = self.random_tool_start(rng, 0.02, Vector3::new(-0.02, 0.0, 0.0));
                        self.place_psm(1, start, ArmFrame::default(), open, 1.0)?;
                    }
                    InitStage::Approach => {
                        self.place_psm(1, g2 + Vector3::new(0.0, 0.0, HOVER), frame, open, 1.0)?;
                    }
                    InitStage::Pick | InitStage::Lift => {
                        let touch = self.touching_opening(&geometry);
                        let lift = if self.config.init_stage == InitStage::Lift {
                            self.lift_clearance()
                        } else {
                            0.0
                        };
                        self.world.bodies[obj].pose.translation.vector.z += lift;
                        self.place_psm(1, g2 + Vector3::new(0.0, 0.0, lift), frame, touch, -1.0)?;
                        self.world.force_grasp(self.psms[1], obj)?;
                    }
                }
            }
            TaskId::NeedleReach => {
                let start = self.random_tool_start(rng, 0.04, Vector3::zeros());
                self.place_psm(0, start, ArmFrame::default(), 0.0, -1.0)?;
            }
            _ => {
                let start = self.random_tool_start(rng, 0.02, Vector3::zeros());
                self.place_psm(0, start, ArmFrame::default(), open, 1.0)?;
            }
        }

        // Goal.
        let obj_pos = self.world.bodies[obj].pose.translation.vector;
        self.goal = match task {
            TaskId::NeedleReach => {
                let g = obj_pos + Vector3::new(0.0, 0.0, self.config.h_above);
                // Never start inside the goal tolerance.
                for _ in 0..100 {
                    if (self.world.tool_pose(self.psms[0]).translation.vector - g).norm() > 2.0 * self.config.epsilon {
                        break;
                    }
                    let start = self.random_tool_start(rng, 0.04, Vector3::zeros());
                    self.place_psm(0, start, ArmFrame::default(), 0.0, -1.0)?;
                }
                vec![g.x, g.y, g.z]
            }
            TaskId::GauzeRetrieve | TaskId::NeedlePick => {
                vec![uniform(rng, -0.04, 0.04), uniform(rng, -0.04, 0.04), support + uniform(rng, 0.035, 0.07)]
            }
            TaskId::PegTransfer | TaskId::BiPegTransfer => {
                let from = start_peg.ok_or_else(|| SimError::Config("block was not seated on a peg".into()))?;
                let mut k = rng.random_range(0..self.pegs.len() - 1);
                if k >= from {
                    k += 1;
                }
                self.target_peg = Some(k);
                let rest_z = self.pegs[from].z + (obj_pos.z - self.world.bodies[obj].aabb().map(|b| b.0.z).unwrap_or(0.0));
                vec![self.pegs[k].x, self.pegs[k].y, rest_z]
            }
            TaskId::NeedleRegrasp => {
                vec![uniform(rng, -0.03, 0.03), uniform(rng, -0.03, 0.03), support + uniform(rng, 0.03, 0.06), 1.0]
            }
            _ => unreachable!("PSM tasks only"),
        };
        Ok(())
    }

    /// Height a held block must rise so its bottom clears the peg tips.
    pub fn lift_clearance(&self) -> f64 {
        let peg_height = self
            .scene_spec
            .objects
            .iter()
            .find_map(|o| match o.spec {
                ObjectSpec::PegBoard { peg_height, .. } => Some(peg_height),
                _ => None,
            })
            .unwrap_or(0.0);
        peg_height + 0.004
    }

    fn random_tool_start(&self, rng: &mut ChaCha8Rng, half: f64, center: Vector3<f64>) -> Vector3<f64> {
        let support = self.world.support_height;
        let (lo, hi) = if self.config.task == TaskId::NeedleReach {
            (0.02, 0.06)
        } else {
            (0.03, 0.05)
        };
        center + Vector3::new(uniform(rng, -half, half), uniform(rng, -half, half), support + uniform(rng, lo, hi))
    }

    fn ecm_random_q(rng: &mut ChaCha8Rng, roll: f64) -> JointVector {
        JointVector {
            values: vec![uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, 0.05, 0.12), roll],
            arm: ArmKind::Ecm,
        }
    }

    fn reset_ecm(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let task = self.config.task;
        self.tool_bounds = Workspace {
            min: Vector3::new(-0.2, -0.4, 0.02),
            max: Vector3::new(0.2, 0.2, 0.45),
        };
        let chain = ecm_chain(&ecm_params());
        let arm = ArmModel::new(chain.clone(), ecm_rcm_pose(), JointVector::zeros(ArmKind::Ecm))?;
        let idx = self.world.add_instrument("ecm", arm, None)?;
        self.ecm = Some(idx);

        if task == TaskId::ActiveTrack {
            let cube = self.target_cube.ok_or_else(|| SimError::Config("tracking scene needs a target cube".into()))?;
            let z = self.world.bodies[cube].pose.translation.vector.z;
            let mut ws = self.scene_spec.workspace;
            ws.min.z = z;
            ws.max.z = z;
            // Keep clear of the walls of the sampled region by the cube size.
            let half = self.world.bodies[cube].aabb().map(|(lo, hi)| 0.5 * (hi.x - lo.x)).unwrap_or(0.0);
            ws.min.x += half;
            ws.min.y += half;
            ws.max.x -= half;
            ws.max.y -= half;
            let path = generate_target_path(&ws, 4, self.config.target_speed, rng.random())?;
            self.world.bodies[cube].pose.translation.vector = path.position(0.0);
            self.path = Some(path);
        }

        match task {
            TaskId::EcmReach => {
                let q0 = Self::ecm_random_q(rng, 0.0);
                self.world.set_instrument_state(idx, &q0, None)?;
                let here = self.world.tool_pose(idx).translation.vector;
                let arm = &self.world.instruments[idx].arm;
                let mut goal = here;
                for _ in 0..100 {
                    let q = Self::ecm_random_q(rng, 0.0);
                    goal = arm.tool_pose_world_at(&q)?.translation.vector;
                    if (goal - here).norm() > 2.0 * self.config.epsilon {
                        break;
                    }
                }
                self.goal = vec![goal.x, goal.y, goal.z];
            }
            TaskId::MisOrient => {
                for _ in 0..100 {
                    let roll = uniform(rng, -1.0, 1.0);
                    let q = Self::ecm_random_q(rng, roll);
                    self.world.set_instrument_state(idx, &q, None)?;
                    if self.misorientation()?.abs() > 5.0 * self.config.delta {
                        break;
                    }
                }
                self.goal = vec![0.0];
            }
            _ => {
                let cube = self.target_cube.ok_or_else(|| SimError::Config("tracking scene needs a target cube".into()))?;
                let target = self.world.bodies[cube].pose.translation.vector;
                let mut placed = false;
                for _ in 0..100 {
                    let roll = uniform(rng, -0.3, 0.3);
                    let q = Self::ecm_random_q(rng, roll);
                    self.world.set_instrument_state(idx, &q, None)?;
                    let cam = self.camera_pose().expect("ecm present");
                    let p = self.camera.project(&cam, &target);
                    let margin = (0.15..=0.85).contains(&p.uv.x) && (0.15..=0.85).contains(&p.uv.y);
                    let centered = (p.uv - IMAGE_CENTER).norm() <= 2.0 * self.config.image_epsilon;
                    if margin && !centered {
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(SimError::PlacementInfeasible {
                        attempts: 100,
                        what: "camera view of the target".into(),
                    });
                }
                self.goal = vec![IMAGE_CENTER.x, IMAGE_CENTER.y, 0.0];
            }
        }
        Ok(())
    }

    pub fn misorientation(&self) -> Result<f64> {
        let cam = self
            .camera_pose()
            .ok_or_else(|| SimError::Contract("task has no camera".into()))?;
        self.camera.misorientation(&cam)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if !self.started {
            return Err(SimError::Contract("step called before reset".into()));
        }
        if self.finished {
            return Err(SimError::Contract("episode is over; call reset".into()));
        }
        if action.len() != self.action_spec.dim() {
            return Err(SimError::DimensionMismatch {
                expected: self.action_spec.dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(SimError::Contract("non-finite action".into()));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let commands = if self.config.task.is_ecm() {
            vec![self.ecm_command(&a)?]
        } else {
            self.psm_commands(&a)?
        };

        if let (Some(path), Some(cube)) = (&self.path, self.target_cube) {
            let t = (self.steps + 1) as f64 * self.control_dt();
            let body = &mut self.world.bodies[cube];
            body.pose.translation.vector = path.position(t);
            body.linear_velocity = Vector3::zeros();
        }

        if let Err(e) = self.world.step_control(&commands) {
            self.finished = true;
            return Err(e);
        }
        self.steps += 1;
        if let Some(obj) = self.object {
            self.ever_stabilized |= self
                .psms
                .iter()
                .filter_map(|i| self.world.grasp_state(*i))
                .any(|g| g.stabilized && g.phase.body() == Some(obj));
        }

        let obs = self.observe()?;
        let reward = compute_reward(&self.config, &obs.achieved_goal, &obs.desired_goal)?;
        let is_success = self.success_from(&obs)?;
        let mut target_lost = false;
        if self.config.task == TaskId::ActiveTrack {
            target_lost = !self.target_projection()?.in_view;
            self.lost_steps = if target_lost { self.lost_steps + 1 } else { 0 };
        }
        let timeout = self.steps >= self.config.horizon;
        let done = timeout || self.lost_steps > self.config.lost_limit;
        self.finished = done;
        Ok(StepResult {
            obs,
            reward,
            done,
            info: StepInfo {
                is_success,
                timeout,
                target_lost,
            },
        })
    }

    /// The task's success predicate on the current state.
    pub fn success_check(&self) -> Result<bool> {
        let obs = self.observe()?;
        self.success_from(&obs)
    }

    fn success_from(&self, obs: &Observation) -> Result<bool> {
        let task = self.config.task;
        let ok = if task == TaskId::ActiveTrack {
            let uv = nalgebra::Vector2::new(obs.achieved_goal[0], obs.achieved_goal[1]);
            (uv - IMAGE_CENTER).norm() <= self.config.image_epsilon && obs.achieved_goal[2].abs() <= self.config.delta
        } else {
            compute_reward(&self.config, &obs.achieved_goal, &obs.desired_goal)? == 0.0
        };
        Ok(ok && (!task.needs_stabilized_grasp() || self.ever_stabilized))
    }

    fn psm_commands(&mut self, a: &[f64]) -> Result<Vec<ArmCommand>> {
        let comps = self.config.task.arm_components();
        let per_arm = comps.len();
        let mut out = Vec::with_capacity(self.psms.len());
        for arm in 0..self.psms.len() {
            let inst = self.psms[arm];
            let block = &a[arm * per_arm..(arm + 1) * per_arm];
            let mut delta = Vector3::zeros();
            let mut frame = self.frames[arm];
            let mut jaw = self.world.instruments[inst].jaw.as_ref().map(|j| j.command).unwrap_or(0.0);
            for (c, v) in comps.iter().zip(block) {
                match c {
                    ActionComponent::Dx => delta.x = v * self.config.translation_scale,
                    ActionComponent::Dy => delta.y = v * self.config.translation_scale,
                    ActionComponent::Dz => delta.z = v * self.config.translation_scale,
                    ActionComponent::DYaw => frame.yaw = (frame.yaw + v * self.config.rotation_scale).clamp(-PI, PI),
                    ActionComponent::DPitch => {
                        frame.pitch = (frame.pitch + v * self.config.rotation_scale).clamp(-PITCH_LIMIT, PITCH_LIMIT)
                    }
                    ActionComponent::Jaw => jaw = *v,
                    _ => {}
                }
            }
            let here = self.world.tool_pose(inst).translation.vector;
            let position = if delta == Vector3::zeros() {
                here
            } else {
                self.tool_bounds.clamp(&(here + delta))
            };
            let target = Pose::from_parts(position.into(), tool_rotation(frame.yaw, frame.pitch));
            let q = solve_pose(&self.world.instruments[inst].arm, &target, &self.ik)?;
            self.frames[arm] = frame;
            out.push(ArmCommand { q, jaw });
        }
        Ok(out)
    }

    fn ecm_command(&mut self, a: &[f64]) -> Result<ArmCommand> {
        let idx = self.ecm.expect("ECM task");
        let arm = &self.world.instruments[idx].arm;
        let mut q = arm.current_q.clone();
        let ts = self.config.translation_scale;
        let rs = self.config.rotation_scale;
        match self.config.task {
            TaskId::EcmReach => {
                let d = Vector3::new(a[0], a[1], a[2]) * ts;
                if d != Vector3::zeros() {
                    let here = arm.tool_pose_world().translation.vector;
                    let target = self.tool_bounds.clamp(&(here + d));
                    q = solve_position(arm, &target, &[3], &self.ik)?;
                }
            }
            TaskId::MisOrient => q[3] += a[0] * rs,
            _ => {
                let dq = camera_twist_to_joints(&arm.chain, &arm.current_q, &[a[0] * ts, a[1] * ts, a[2] * ts, a[3] * rs])?;
                for i in 0..4 {
                    q[i] += dq[i];
                }
            }
        }
        Ok(ArmCommand { q, jaw: 0.0 })
    }

    fn target_projection(&self) -> Result<super::Projection> {
        let cam = self.camera_pose().ok_or_else(|| SimError::Contract("task has no camera".into()))?;
        let cube = self
            .target_cube
            .ok_or_else(|| SimError::Contract("task has no tracked target".into()))?;
        Ok(self.camera.project(&cam, &self.world.bodies[cube].pose.translation.vector))
    }

    /// Observation of the current state; a pure function of the world and goal.
    pub fn observe(&self) -> Result<Observation> {
        let task = self.config.task;
        let mut o = Vec::with_capacity(48);
        let achieved: Vec<f64>;
        if let Some(ecm) = self.ecm {
            let arm = &self.world.instruments[ecm].arm;
            let cam = arm.tool_pose_world().translation.vector;
            o.extend_from_slice(cam.as_slice());
            o.extend_from_slice(&arm.current_q.values);
            match task {
                TaskId::EcmReach => achieved = vec![cam.x, cam.y, cam.z],
                TaskId::MisOrient => {
                    let theta = self.misorientation()?;
                    o.push(theta);
                    achieved = vec![theta];
                }
                _ => {
                    let theta = self.misorientation()?;
                    let p = self.target_projection()?;
                    let target = self.world.bodies[self.target_cube.expect("tracking target")].pose.translation.vector;
                    o.extend_from_slice(target.as_slice());
                    o.extend_from_slice(&[p.uv.x, p.uv.y, p.depth, theta, if p.in_view { 1.0 } else { 0.0 }]);
                    achieved = vec![p.uv.x, p.uv.y, theta];
                }
            }
        } else {
            let obj = self.object.expect("PSM tasks have an object");
            for inst in &self.psms {
                let tool = self.world.tool_pose(*inst);
                o.extend_from_slice(tool.translation.vector.as_slice());
                o.push(if task == TaskId::NeedleRegrasp {
                    tool_pitch(&tool.rotation)
                } else {
                    tool_yaw(&tool.rotation)
                });
                let jaw = self.world.instruments[*inst].jaw.as_ref().expect("PSMs carry jaws");
                o.push(jaw.opening / jaw.geometry.max_half_angle);
            }
            let pose = self.world.bodies[obj].pose;
            o.extend_from_slice(pose.translation.vector.as_slice());
            o.push(planar_yaw(&pose));
            for (arm, inst) in self.psms.iter().enumerate() {
                let tool = self.world.tool_pose(*inst).translation.vector;
                let (g, yaw) = self.grasp_target(arm).unwrap_or((pose.translation.vector, 0.0));
                o.extend_from_slice(g.as_slice());
                o.extend_from_slice((g - tool).as_slice());
                o.push(yaw);
                o.push(if self.holds_object(arm) { 1.0 } else { 0.0 });
            }
            let p = pose.translation.vector;
            achieved = match task {
                TaskId::NeedleReach => self.world.tool_pose(self.psms[0]).translation.vector.as_slice().to_vec(),
                TaskId::NeedleRegrasp => vec![p.x, p.y, p.z, if self.holds_object(0) { 1.0 } else { 0.0 }],
                _ => vec![p.x, p.y, p.z],
            };
        }
        let obs = Observation {
            observation: o,
            achieved_goal: achieved,
            desired_goal: self.goal.clone(),
        };
        if !obs.is_finite() {
            return Err(SimError::Contract("non-finite observation".into()));
        }
        Ok(obs)
    }
}

/// Joint increments realizing a camera-frame displacement
/// `(dx, dy, dz, droll)` (roll about the optical axis) to first order.
pub fn camera_twist_to_joints(
    chain: &crate::kinematics::ChainSpec,
    q: &JointVector,
    twist: &[f64; 4],
) -> Result<Vec<f64>> {
    let j = jacobian(chain, q)?;
    let rot = tool_pose(chain, q)?.rotation.to_rotation_matrix();
    let rt = rot.matrix().transpose();
    let n = chain.dof();
    let lin = rt * j.fixed_view::<3, 4>(0, 0).clone_owned();
    let ang = rt * j.fixed_view::<3, 4>(3, 0).clone_owned();
    let m = DMatrix::from_fn(4, n, |r, c| if r < 3 { lin[(r, c)] } else { ang[(2, c)] });
    let d = DVector::from_column_slice(twist);
    let a = &m * m.transpose() + DMatrix::identity(4, 4) * 1e-8;
    let y = a
        .cholesky()
        .ok_or_else(|| SimError::Contract("camera Jacobian is singular".into()))?
        .solve(&d);
    Ok((m.transpose() * y).iter().copied().collect())
}
