//! Deterministic rigid-body world with impulse contacts and jaw grasping.
//!
//! Instruments are kinematic: their joints are interpolated toward the
//! commanded targets across the substeps of a control step, and their jaw
//! pads push on dynamic bodies through ordinary contacts. Grasping follows
//! one of two models selected by [`GraspMode`].

mod body;
mod collision;
mod grasp;
mod snapshot;
mod solver;
mod world;

pub use body::{Collider, ColliderPart, MaterialParams, RigidBody, Shape};
pub use collision::ContactPoint;
pub use grasp::{point_distance, GraspMode, GraspPhase, GraspState, JawGeometry};
pub use snapshot::{BodyState, InstrumentState, JawState, WorldSnapshot, SNAPSHOT_VERSION};
pub use solver::{combine_friction, ContactImpulse, SolverParams};
pub use world::{ArmCommand, Instrument, Jaw, World, WorldConfig};
