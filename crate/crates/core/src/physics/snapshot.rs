use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::grasp::GraspState;
use super::world::World;
use crate::error::{Result, SimError};
use crate::kinematics::{JointVector, Pose};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub name: String,
    pub pose: Pose,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JawState {
    pub opening: f64,
    pub command: f64,
    pub grasp: GraspState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentState {
    pub name: String,
    pub q: JointVector,
    pub jaw: Option<JawState>,
}

/// Dynamic state of a world; structure (colliders, chains) is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub version: u32,
    pub substep_count: u64,
    pub bodies: Vec<BodyState>,
    pub instruments: Vec<InstrumentState>,
}

impl WorldSnapshot {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: Self = serde_json::from_str(s)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(SimError::Config(format!(
                "snapshot version {} is not supported (expected {SNAPSHOT_VERSION})",
                snap.version
            )));
        }
        Ok(snap)
    }
}

impl World {
    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            version: SNAPSHOT_VERSION,
            substep_count: self.substep_count,
            bodies: self
                .bodies
                .iter()
                .map(|b| BodyState {
                    name: b.name.clone(),
                    pose: b.pose,
                    linear_velocity: b.linear_velocity,
                    angular_velocity: b.angular_velocity,
                })
                .collect(),
            instruments: self
                .instruments
                .iter()
                .map(|i| InstrumentState {
                    name: i.name.clone(),
                    q: i.arm.current_q.clone(),
                    jaw: i.jaw.as_ref().map(|j| JawState {
                        opening: j.opening,
                        command: j.command,
                        grasp: j.grasp.clone(),
                    }),
                })
                .collect(),
        }
    }

    /// Overwrite dynamic state from a snapshot of a structurally identical world.
    pub fn restore(&mut self, snap: &WorldSnapshot) -> Result<()> {
        let same_bodies = snap.bodies.len() == self.bodies.len()
            && snap.bodies.iter().zip(&self.bodies).all(|(s, b)| s.name == b.name);
        let same_instruments = snap.instruments.len() == self.instruments.len()
            && snap
                .instruments
                .iter()
                .zip(&self.instruments)
                .all(|(s, i)| s.name == i.name && s.q.arm == i.arm.current_q.arm && s.jaw.is_some() == i.jaw.is_some());
        if !(same_bodies && same_instruments) {
            return Err(SimError::Config("snapshot does not match the world structure".into()));
        }
        for (s, b) in snap.bodies.iter().zip(self.bodies.iter_mut()) {
            b.pose = s.pose;
            b.linear_velocity = s.linear_velocity;
            b.angular_velocity = s.angular_velocity;
        }
        for (s, i) in snap.instruments.iter().zip(self.instruments.iter_mut()) {
            i.arm.current_q = s.q.clone();
            if let (Some(js), Some(j)) = (&s.jaw, i.jaw.as_mut()) {
                j.opening = js.opening;
                j.command = js.command;
                j.grasp = js.grasp.clone();
            }
        }
        self.substep_count = snap.substep_count;
        self.valid = true;
        Ok(())
    }
}
