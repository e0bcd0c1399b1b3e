//! The ten task environments: action mapping, observations, goals, rewards
//! and the ECM camera model.

mod camera;
mod path;
mod task;

pub use camera::{active_track_reward, CameraModel, Projection, IMAGE_CENTER};
pub use path::{generate_target_path, TargetPath};
pub use task::{camera_twist_to_joints, ecm_arm_model, tool_rotation, ArmFrame, TaskEnv, HOVER};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::assets::SceneSpec;
use crate::error::{Result, SimError};
use crate::physics::GraspMode;

/// Tool translation per unit action per step, meters.
pub const TRANSLATION_SCALE: f64 = 0.005;
/// Rotation per unit action per step, radians.
pub const ROTATION_SCALE: f64 = 0.1;
/// Height of the NeedleReach goal above the needle.
pub const H_ABOVE: f64 = 0.005;
/// Vertical tolerance for a block to count as seated on its peg.
pub const SEAT_TOLERANCE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    NeedleReach,
    GauzeRetrieve,
    NeedlePick,
    PegTransfer,
    NeedleRegrasp,
    BiPegTransfer,
    EcmReach,
    MisOrient,
    StaticTrack,
    ActiveTrack,
}

impl TaskId {
    pub const ALL: [TaskId; 10] = [
        TaskId::NeedleReach,
        TaskId::GauzeRetrieve,
        TaskId::NeedlePick,
        TaskId::PegTransfer,
        TaskId::NeedleRegrasp,
        TaskId::BiPegTransfer,
        TaskId::EcmReach,
        TaskId::MisOrient,
        TaskId::StaticTrack,
        TaskId::ActiveTrack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::NeedleReach => "NeedleReach",
            TaskId::GauzeRetrieve => "GauzeRetrieve",
            TaskId::NeedlePick => "NeedlePick",
            TaskId::PegTransfer => "PegTransfer",
            TaskId::NeedleRegrasp => "NeedleRegrasp",
            TaskId::BiPegTransfer => "BiPegTransfer",
            TaskId::EcmReach => "EcmReach",
            TaskId::MisOrient => "MisOrient",
            TaskId::StaticTrack => "StaticTrack",
            TaskId::ActiveTrack => "ActiveTrack",
        }
    }

    pub fn is_goal_based(self) -> bool {
        self != TaskId::ActiveTrack
    }

    pub fn default_horizon(self) -> usize {
        if self.is_goal_based() {
            50
        } else {
            500
        }
    }

    pub fn arms(self) -> ArmSet {
        match self {
            TaskId::NeedleRegrasp | TaskId::BiPegTransfer => ArmSet::Bimanual,
            TaskId::EcmReach | TaskId::MisOrient | TaskId::StaticTrack | TaskId::ActiveTrack => ArmSet::Ecm,
            _ => ArmSet::Psm1,
        }
    }

    pub fn is_ecm(self) -> bool {
        self.arms() == ArmSet::Ecm
    }

    /// Action components for one arm, in order.
    pub fn arm_components(self) -> &'static [ActionComponent] {
        use ActionComponent::*;
        match self {
            TaskId::NeedleReach | TaskId::EcmReach => &[Dx, Dy, Dz],
            TaskId::GauzeRetrieve => &[Dx, Dy, Dz, Jaw],
            TaskId::NeedlePick | TaskId::PegTransfer | TaskId::BiPegTransfer => &[Dx, Dy, Dz, DYaw, Jaw],
            TaskId::NeedleRegrasp => &[Dx, Dy, Dz, DPitch, Jaw],
            TaskId::MisOrient => &[DRoll],
            TaskId::StaticTrack | TaskId::ActiveTrack => &[CamVx, CamVy, CamVz, CamWz],
        }
    }

    pub fn goal_dim(self) -> usize {
        match self {
            TaskId::MisOrient => 1,
            TaskId::NeedleRegrasp => 4,
            _ => 3,
        }
    }

    pub(crate) fn scene_name(self) -> &'static str {
        match self {
            TaskId::NeedleReach | TaskId::NeedlePick | TaskId::NeedleRegrasp => "tray_needle",
            TaskId::GauzeRetrieve => "tray_gauze",
            TaskId::PegTransfer | TaskId::BiPegTransfer => "pegboard",
            TaskId::EcmReach | TaskId::MisOrient | TaskId::StaticTrack => "ecm_cubes",
            TaskId::ActiveTrack => "ecm_moving_cube",
        }
    }

    /// Tasks whose success additionally needs a stabilized grasp en route.
    pub fn needs_stabilized_grasp(self) -> bool {
        matches!(self, TaskId::GauzeRetrieve | TaskId::NeedlePick)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = SimError;

    /// Accepts `NeedlePick`, `needle_pick`, `needle-pick` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().to_ascii_lowercase() == key)
            .ok_or_else(|| SimError::Config(format!("unknown task '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmSet {
    Psm1,
    /// PSM1 block first, then PSM2.
    Bimanual,
    Ecm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionComponent {
    Dx,
    Dy,
    Dz,
    DYaw,
    DPitch,
    /// `>= 0` opens the jaw, `< 0` closes it.
    Jaw,
    DRoll,
    CamVx,
    CamVy,
    CamVz,
    CamWz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub arms: ArmSet,
    pub components: Vec<ActionComponent>,
    /// Physical step per unit action for each component (zero for the jaw).
    pub scale: Vec<f64>,
}

impl ActionSpec {
    pub fn for_task(config: &TaskConfig) -> Self {
        let per_arm = config.task.arm_components();
        let copies = if config.task.arms() == ArmSet::Bimanual { 2 } else { 1 };
        let components: Vec<ActionComponent> = (0..copies).flat_map(|_| per_arm.iter().copied()).collect();
        let scale = components
            .iter()
            .map(|c| match c {
                ActionComponent::Jaw => 0.0,
                ActionComponent::DYaw | ActionComponent::DPitch | ActionComponent::DRoll | ActionComponent::CamWz => {
                    config.rotation_scale
                }
                _ => config.translation_scale,
            })
            .collect();
        Self {
            arms: config.task.arms(),
            components,
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// Pre-completed stages of the BiPegTransfer pick for PSM2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStage {
    #[default]
    None,
    Approach,
    Pick,
    Lift,
}

impl FromStr for InitStage {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(InitStage::None),
            "approach" => Ok(InitStage::Approach),
            "pick" => Ok(InitStage::Pick),
            "lift" => Ok(InitStage::Lift),
            _ => Err(SimError::Config(format!("unknown init stage '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskId,
    /// Position tolerance, meters.
    pub epsilon: f64,
    /// Orientation tolerance, radians.
    pub delta: f64,
    /// Normalized image-position tolerance.
    pub image_epsilon: f64,
    pub horizon: usize,
    pub grasp_mode: GraspMode,
    pub translation_scale: f64,
    pub rotation_scale: f64,
    pub init_stage: InitStage,
    pub h_above: f64,
    /// ActiveTrack target speed, m/s.
    pub target_speed: f64,
    /// ActiveTrack ends once the target has been out of view this many steps.
    pub lost_limit: usize,
    /// Scene override; the shipped default for the task is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

impl TaskConfig {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            epsilon: 0.005,
            delta: 0.01,
            image_epsilon: 0.01,
            horizon: task.default_horizon(),
            grasp_mode: GraspMode::Interact,
            translation_scale: TRANSLATION_SCALE,
            rotation_scale: ROTATION_SCALE,
            init_stage: if task == TaskId::BiPegTransfer {
                InitStage::Pick
            } else {
                InitStage::None
            },
            h_above: H_ABOVE,
            target_speed: 0.01,
            lost_limit: 20,
            scene: None,
        }
    }

    pub fn with_grasp_mode(mut self, mode: GraspMode) -> Self {
        self.grasp_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.epsilon,
            self.delta,
            self.image_epsilon,
            self.translation_scale,
            self.rotation_scale,
            self.target_speed,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.horizon == 0 || self.h_above < 0.0 {
            return Err(SimError::Config("task tolerances, scales and horizon must be positive".into()));
        }
        if self.init_stage != InitStage::None && self.task != TaskId::BiPegTransfer {
            return Err(SimError::Config("init_stage only applies to BiPegTransfer".into()));
        }
        self.grasp_mode.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub observation: Vec<f64>,
    pub achieved_goal: Vec<f64>,
    pub desired_goal: Vec<f64>,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.observation
            .iter()
            .chain(&self.achieved_goal)
            .chain(&self.desired_goal)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub is_success: bool,
    /// The episode ended because the horizon was reached.
    pub timeout: bool,
    /// ActiveTrack: the target was out of view this step.
    pub target_lost: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Dimensions a client needs to drive an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub task: TaskId,
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub action: ActionSpec,
}

/// Reward as a pure function of goals: `0` on success and `-1` otherwise
/// for goal-based tasks; the dense tracking reward for ActiveTrack.
pub fn compute_reward(config: &TaskConfig, achieved: &[f64], desired: &[f64]) -> Result<f64> {
    let task = config.task;
    let n = task.goal_dim();
    if achieved.len() != n || desired.len() != n {
        return Err(SimError::DimensionMismatch {
            expected: n,
            got: if achieved.len() != n { achieved.len() } else { desired.len() },
        });
    }
    let dist = |k: usize| -> f64 { (0..k).map(|i| (achieved[i] - desired[i]).powi(2)).sum::<f64>().sqrt() };
    let hit = match task {
        TaskId::MisOrient => (achieved[0] - desired[0]).abs() <= config.delta,
        TaskId::StaticTrack => dist(2) <= config.image_epsilon && (achieved[2] - desired[2]).abs() <= config.delta,
        TaskId::ActiveTrack => {
            let uv = Vector2::new(achieved[0], achieved[1]);
            let visible = (0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y);
            return Ok(if visible {
                active_track_reward(&uv, achieved[2]).max(-1.0)
            } else {
                -1.0
            });
        }
        TaskId::PegTransfer | TaskId::BiPegTransfer => {
            dist(2) <= config.epsilon && (achieved[2] - desired[2]).abs() <= SEAT_TOLERANCE
        }
        TaskId::NeedleRegrasp => dist(3) <= config.epsilon && (achieved[3] - desired[3]).abs() < 0.5,
        _ => dist(3) <= config.epsilon,
    };
    Ok(if hit { 0.0 } else { -1.0 })
}

/// One line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t: usize,
    pub obs: Observation,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub is_success: bool,
}

/// Writes records as JSON lines.
pub fn write_episode_jsonl<W: Write>(mut out: W, records: &[TransitionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episode_jsonl(text: &str) -> Result<Vec<TransitionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
