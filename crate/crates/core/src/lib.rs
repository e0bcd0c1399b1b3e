//! Desk-scale surgical robot learning simulator.
//!
//! * [`kinematics`]: PSM/ECM serial chains around a remote center of motion.
//! * [`physics`]: deterministic rigid-body world with analytic colliders,
//!   sequential-impulse contacts and two grasp models.
//! * [`assets`]: tables, needles, pegs, gauze and their scene layouts.
//! * [`envs`]: goal-conditioned task environments behind one step API.
//! * [`demos`]: scripted experts and the demo file format.

pub mod assets;
pub mod demos;
pub mod envs;
pub mod error;
pub mod kinematics;
pub mod physics;

pub use error::{Result, SimError};
